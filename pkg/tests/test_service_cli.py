import hashlib
import json
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from morphix.audio import save_spectrogram, spectrogram_from_bytes
from morphix.cli import main
from morphix.config import load_config
from morphix.latent_core import mask_to_dict
from morphix.metrics import make_synthetic_editset
from morphix.service import create_app
from morphix.store import AssetStore


@pytest.fixture()
def triple():
    return make_synthetic_editset(3, 2)[0]


def request_json(tr, source, reference, steps=15):
    return {
        "kind": "add",
        "source": source,
        "reference": reference,
        "mask_c": mask_to_dict(tr.mask_c),
        "mask_r": mask_to_dict(tr.mask_r),
        "alpha": 0.5,
        "weights": {"w_content": 1.0, "w_edit": 1.0, "eta": 1.0, "layers": [0]},
        "sampler": {"steps": steps, "eta": 0.0, "cfg_scale": 1.0, "seed": 5,
                    "schedule": {"T": 1000, "shape": "linear"}},
    }


class TestAssetStore:
    def test_content_addressing(self, tmp_path):
        store = AssetStore(str(tmp_path))
        a = store.put(b"hello world")
        b = store.put(b"hello world")
        assert a == b == hashlib.sha256(b"hello world").hexdigest()
        assert store.get(a) == b"hello world"

    def test_kind_sniffing(self, tmp_path, triple):
        store = AssetStore(str(tmp_path))
        from morphix.audio import spectrogram_to_bytes
        asset_id = store.put(spectrogram_to_bytes(triple.source))
        assert store.info(asset_id).kind == "spectrogram"

    def test_unknown_asset(self, tmp_path):
        store = AssetStore(str(tmp_path))
        with pytest.raises(KeyError):
            store.get("0" * 64)


class TestCli:
    def _write_assets(self, runner, tr):
        save_spectrogram(tr.source, "src.spg")
        save_spectrogram(tr.reference, "ref.spg")
        with open("req.json", "w") as fh:
            json.dump(request_json(tr, "src.spg", "ref.spg"), fh)

    def test_edit_deterministic_bytes(self, triple):
        runner = CliRunner()
        with runner.isolated_filesystem():
            self._write_assets(runner, triple)
            r1 = runner.invoke(main, ["edit", "--request", "req.json", "--out-dir", "a", "--trace"])
            assert r1.exit_code == 0, r1.output
            r2 = runner.invoke(main, ["edit", "--request", "req.json", "--out-dir", "b", "--trace"])
            assert r2.exit_code == 0
            for name in ("result.spg", "result.wav", "trace.csv"):
                assert open(f"a/{name}", "rb").read() == open(f"b/{name}", "rb").read()

    def test_edit_missing_reference_exits_2(self, triple):
        runner = CliRunner()
        with runner.isolated_filesystem():
            save_spectrogram(triple.source, "src.spg")
            req = request_json(triple, "src.spg", "ref.spg")
            del req["reference"]
            with open("req.json", "w") as fh:
                json.dump(req, fh)
            r = runner.invoke(main, ["edit", "--request", "req.json", "--out-dir", "o"])
            assert r.exit_code == 2

    def test_render_golden_stability(self, triple):
        runner = CliRunner()
        with runner.isolated_filesystem():
            save_spectrogram(triple.source, "src.spg")
            r1 = runner.invoke(main, ["render", "--input", "src.spg", "--output", "a.png"])
            r2 = runner.invoke(main, ["render", "--input", "src.spg", "--output", "b.png"])
            assert r1.exit_code == 0 and r2.exit_code == 0
            assert open("a.png", "rb").read() == open("b.png", "rb").read()

    def test_gl_and_invert_commands(self, triple):
        runner = CliRunner()
        with runner.isolated_filesystem():
            save_spectrogram(triple.source, "src.spg")
            r = runner.invoke(main, ["gl", "--input", "src.spg", "--output", "x.wav",
                                     "--iters", "4", "--seed", "3"])
            assert r.exit_code == 0
            r = runner.invoke(main, ["invert", "--input", "src.spg",
                                     "--out-latent", "z.npy", "--out-bank", "b.mrxb",
                                     "--steps", "10"])
            assert r.exit_code == 0
            z = np.load("z.npy")
            assert z.shape == (4, 16, 16)
            assert os.path.exists("b.mrxb")

    def test_bad_format_exits_3(self):
        runner = CliRunner()
        with runner.isolated_filesystem():
            with open("junk.spg", "wb") as fh:
                fh.write(b"NOTSPG" + b"\x00" * 40)
            r = runner.invoke(main, ["render", "--input", "junk.spg", "--output", "x.png"])
            assert r.exit_code == 3

    def test_bench_generate(self):
        runner = CliRunner()
        with runner.isolated_filesystem():
            r = runner.invoke(main, ["bench", "--generate", "2", "--seed", "4",
                                     "--out", "m.csv"])
            assert r.exit_code == 0, r.output
            lines = open("m.csv").read().splitlines()
            assert lines[0] == "case,kind,frechet,kl,masked_rms,unmasked_rms"
            assert len(lines) == 3
            assert os.path.exists("m.csv.json")

    def test_train_toy_writes_checkpoint(self):
        runner = CliRunner()
        with runner.isolated_filesystem():
            r = runner.invoke(main, ["train-toy", "--steps", "5", "--out", "m.ckpt",
                                     "--shape", "2x8x8", "--loss-csv", "l.csv", "--seed", "1"])
            assert r.exit_code == 0, r.output
            from morphix.models import load_checkpoint
            model = load_checkpoint("m.ckpt")
            assert model.latent_shape == (2, 8, 8)
            assert len(open("l.csv").read().splitlines()) == 6


@pytest.fixture()
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("MORPHIX_DATA_DIR", str(tmp_path / "data"))
    cfg = load_config(None)
    app = create_app(cfg)
    with TestClient(app) as c:
        yield c


def _upload(client, spec):
    from morphix.audio import spectrogram_to_bytes
    r = client.post("/assets", files={"file": ("x.spg", spectrogram_to_bytes(spec))})
    assert r.status_code == 201
    return r.json()["id"]


def _wait(client, job_id, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        st = client.get(f"/edits/{job_id}").json()
        if st["state"] in ("done", "failed"):
            return st
        time.sleep(0.05)
    raise TimeoutError


class TestService:
    def test_health(self, client):
        assert client.get("/health").json() == {"ok": True}

    def test_full_edit_lifecycle(self, client, triple):
        sid = _upload(client, triple.source)
        rid = _upload(client, triple.reference)
        req = request_json(triple, sid, rid)
        r = client.post("/edits", json=req)
        assert r.status_code == 202
        st = _wait(client, r.json()["job_id"])
        assert st["state"] == "done", st.get("error")
        result = st["result"]
        spg = client.get(f"/assets/{result['spectrogram']}")
        assert spg.status_code == 200
        spec = spectrogram_from_bytes(spg.content)
        assert spec.frames == triple.source.frames
        wav = client.get(f"/assets/{result['waveform']}")
        assert wav.status_code == 200 and wav.content[:4] == b"RIFF"
        png = client.get(f"/assets/{result['spectrogram']}/render.png")
        assert png.status_code == 200 and png.content[:8] == b"\x89PNG\r\n\x1a\n"
        trace = client.get(f"/edits/{r.json()['job_id']}/trace")
        assert trace.status_code == 200
        assert trace.text.splitlines()[0] == "step,energy"

    def test_content_addressing_via_http(self, client, triple):
        a = _upload(client, triple.source)
        b = _upload(client, triple.source)
        assert a == b

    def test_unknown_asset_404(self, client):
        assert client.get("/assets/" + "0" * 64).status_code == 404
        assert client.get("/assets/" + "0" * 64 + "/render.png").status_code == 404
        assert client.get("/edits/nope").status_code == 404

    def test_idempotency_replay_and_conflict(self, client, triple):
        sid = _upload(client, triple.source)
        rid = _upload(client, triple.reference)
        req = request_json(triple, sid, rid)
        r1 = client.post("/edits", json=req, headers={"idempotency-key": "job-1"})
        r2 = client.post("/edits", json=req, headers={"idempotency-key": "job-1"})
        assert r1.json()["job_id"] == r2.json()["job_id"]
        conflict = client.post("/edits", json={**req, "alpha": 0.9},
                               headers={"idempotency-key": "job-1"})
        assert conflict.status_code == 409

    def test_schema_violations_rejected(self, client):
        assert client.post("/edits", json={"kind": "add"}).status_code == 400
        assert client.post("/edits", json=["not", "an", "object"]).status_code == 400
        r = client.post("/edits", content=b"{not json",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400

    def test_unknown_source_asset_fails_job(self, client, triple):
        req = request_json(triple, "0" * 64, "1" * 64)
        r = client.post("/edits", json=req)
        assert r.status_code == 202
        st = _wait(client, r.json()["job_id"])
        assert st["state"] == "failed"
        assert "asset" in st["error"]

    def test_malformed_fuzz_never_crashes(self, client):
        rng = np.random.default_rng(0)
        payloads = [
            {}, {"kind": 5}, {"kind": "add", "source": None},
            {"kind": "add", "source": "x", "mask_c": "nope"},
            {"kind": "remove", "source": "x", "mask_c": {"time_len": -1}},
        ]
        for _ in range(1000):
            blob = bytes(rng.integers(32, 127, size=rng.integers(1, 60)).tolist())
            r = client.post("/edits", content=blob,
                            headers={"content-type": "application/json"})
            assert r.status_code in (400, 422)
        for p in payloads:
            r = client.post("/edits", json=p)
            assert r.status_code == 400
        assert client.get("/health").json() == {"ok": True}


class TestConfig:
    def test_env_var_overrides_data_dir(self, tmp_path, monkeypatch):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"service": {"data_dir": "/somewhere/else"}}))
        monkeypatch.setenv("MORPHIX_DATA_DIR", "/env/wins")
        cfg = load_config(str(cfg_path))
        assert cfg.service.data_dir == "/env/wins"

    def test_sections_parse(self, tmp_path, monkeypatch):
        monkeypatch.delenv("MORPHIX_DATA_DIR", raising=False)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "sampler": {"steps": 25, "schedule": {"T": 500, "shape": "cosine"}},
            "guidance": {"w_content": 0.5, "layers": [1, 2]},
            "morph": {"n_iter": 7},
            "stft": {"n_fft": 256, "hop": 64},
            "model": {"kind": "analytic", "var": 2.0, "latent_shape": [4, 8, 8]},
            "service": {"port": 9000, "workers": 1, "data_dir": "/tmp/x"},
        }))
        cfg = load_config(str(cfg_path))
        assert cfg.sampler.num_inference_steps == 25
        assert cfg.schedule.steps == 500 and cfg.schedule.shape == "cosine"
        assert cfg.guidance.w_content == 0.5 and cfg.guidance.tap_layers == (1, 2)
        assert cfg.morph.n_iter == 7
        assert cfg.stft.n_fft == 256
        assert cfg.model.latent_shape == (4, 8, 8)
        assert cfg.service.port == 9000
        model = cfg.build_model()
        assert model.latent_shape == (4, 8, 8)
