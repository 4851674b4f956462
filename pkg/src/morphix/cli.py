"""Command-line interface.

Exit codes: 0 success, 2 bad arguments, 3 format error, 4 compute error.
Every command is deterministic for a fixed --seed.
"""

from __future__ import annotations

import functools
import json
import sys

import click
import numpy as np

from morphix import audio
from morphix.config import load_config
from morphix.editor import EditEngine, EditRequestError, edit_request_from_dict
from morphix.kv_cache import BankFormatError, save_bank
from morphix.latent_core import mask_from_json
from morphix.models import CheckpointFormatError
from morphix.sampling import SamplerConfig, invert_loop

EXIT_BAD_ARGS = 2
EXIT_FORMAT = 3
EXIT_COMPUTE = 4

_FORMAT_ERRORS = (audio.AudioFormatError, BankFormatError, CheckpointFormatError)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _FORMAT_ERRORS as exc:
            click.echo(f"format error: {exc}", err=True)
            sys.exit(EXIT_FORMAT)
        except (EditRequestError, ValueError, KeyError) as exc:
            click.echo(f"invalid request: {exc}", err=True)
            sys.exit(EXIT_BAD_ARGS)
        except Exception as exc:  # noqa: BLE001 - surface compute failures as exit 4
            click.echo(f"compute error: {exc}", err=True)
            sys.exit(EXIT_COMPUTE)
    return wrapper


def _load_spectrogram_arg(path: str, cfg) -> audio.Spectrogram:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == b"SPG1":
        return audio.spectrogram_from_bytes(data)
    if data[:4] == b"RIFF":
        return audio.stft(audio.waveform_from_bytes(data), cfg.stft)
    raise audio.AudioFormatError(f"{path}: neither SPG1 nor WAV")


@click.group()
def main():
    """Spectrogram region editing with guided diffusion sampling."""


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out-latent", required=True, type=click.Path())
@click.option("--out-bank", type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=0, type=int)
@_guarded
def invert(input_path, out_latent, out_bank, config_path, steps, seed):
    """Invert audio or a spectrogram into its noise latent (plus K/V bank)."""
    cfg = load_config(config_path)
    spec = _load_spectrogram_arg(input_path, cfg)
    model = cfg.build_model()
    engine = EditEngine(model, cfg.schedule)
    z0 = engine._to_latent(spec)
    n = steps or cfg.sampler.num_inference_steps
    scfg = SamplerConfig(num_inference_steps=n, eta=0.0, cfg_scale=1.0, seed=seed)
    bank = engine.make_bank(n)
    z_t = invert_loop(z0, model, None, scfg, cfg.schedule, bank=bank)
    np.save(out_latent, z_t.values)
    if out_bank:
        save_bank(bank, out_bank)
    click.echo(f"inverted {input_path} -> {out_latent}")


@main.command()
@click.option("--request", "request_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=None, type=int, help="Overrides the request sampler seed.")
@click.option("--trace", is_flag=True, help="Also write the energy trace CSV.")
@_guarded
def edit(request_path, out_dir, config_path, seed, trace):
    """Run an edit request; source/reference fields are file paths."""
    import os
    from dataclasses import replace as dc_replace

    cfg = load_config(config_path)
    with open(request_path) as fh:
        req_obj = json.load(fh)
    req = edit_request_from_dict(req_obj)
    if seed is not None:
        req = dc_replace(req, sampler=dc_replace(req.sampler, seed=seed))
    assets = {}
    for key in ("source", "reference", "reference_out"):
        path = getattr(req, key)
        if path is not None:
            assets[path] = _load_spectrogram_arg(path, cfg)
    model = cfg.build_model()
    engine = EditEngine(model, cfg.schedule)
    result = engine.run(req, assets)
    os.makedirs(out_dir, exist_ok=True)
    audio.save_spectrogram(result.spectrogram, os.path.join(out_dir, "result.spg"))
    wav = audio.griffin_lim(result.spectrogram, seed=req.sampler.seed)
    audio.save_waveform(wav, os.path.join(out_dir, "result.wav"))
    with open(os.path.join(out_dir, "provenance.json"), "w") as fh:
        json.dump(result.provenance, fh, indent=2, sort_keys=True)
    if trace:
        with open(os.path.join(out_dir, "trace.csv"), "w") as fh:
            fh.write(result.trace_csv())
        if result.morph_trace is not None:
            with open(os.path.join(out_dir, "morph_trace.csv"), "w") as fh:
                fh.write(result.morph_trace_csv())
    click.echo(f"edit done -> {out_dir}")


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--mask", "mask_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@_guarded
def render(input_path, output, mask_path, config_path, seed):
    """Render a spectrogram to PNG, optionally with a mask overlay."""
    cfg = load_config(config_path)
    spec = _load_spectrogram_arg(input_path, cfg)
    mask = None
    if mask_path:
        with open(mask_path) as fh:
            mask = mask_from_json(fh.read())
    png = audio.render_png(spec, mask)
    with open(output, "wb") as fh:
        fh.write(png)
    click.echo(f"rendered {input_path} -> {output}")


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--iters", default=32, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@_guarded
def gl(input_path, output, iters, config_path, seed):
    """Griffin-Lim a spectrogram back to a WAV file."""
    cfg = load_config(config_path)
    spec = _load_spectrogram_arg(input_path, cfg)
    wav = audio.griffin_lim(spec, iters=iters, seed=seed)
    audio.save_waveform(wav, output)
    click.echo(f"reconstructed {input_path} -> {output}")


@main.command()
@click.option("--editset", "editset_dir", type=click.Path(exists=True))
@click.option("--generate", default=0, type=int, help="Generate this many cases instead.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@_guarded
def bench(editset_dir, generate, out_path, config_path, seed):
    """Run the edit benchmark and write a metrics report (CSV + JSON)."""
    from morphix.bench import run_benchmark
    from morphix.metrics import load_editset, make_synthetic_editset

    cfg = load_config(config_path)
    if generate > 0:
        triples = make_synthetic_editset(seed, generate)
    elif editset_dir:
        triples = load_editset(editset_dir)
    else:
        raise click.UsageError("provide --editset or --generate")
    rows = run_benchmark(triples, cfg)
    lines = ["case,kind,frechet,kl,masked_rms,unmasked_rms"]
    for r in rows:
        lines.append(f"{r['case']},{r['kind']},{r['frechet']!r},{r['kl']!r},"
                     f"{r['masked_rms']!r},{r['unmasked_rms']!r}")
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(out_path + ".json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    click.echo(f"benchmark -> {out_path}")


@main.command("train-toy")
@click.option("--steps", default=5000, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--shape", default="2x16x16", help="Latent shape CxHxW.")
@click.option("--loss-csv", type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@_guarded
def train_toy(steps, out_path, shape, loss_csv, config_path, seed):
    """Train the toy denoiser on the synthetic two-class corpus."""
    from morphix.models import ToyDenoiser, make_two_class_dataset, save_checkpoint, toy_train

    cfg = load_config(config_path)
    dims = tuple(int(x) for x in shape.split("x"))
    if len(dims) != 3:
        raise click.UsageError("--shape must be CxHxW")
    model = ToyDenoiser(latent_shape=dims, seed=seed, schedule_steps=cfg.schedule.steps)
    trace = toy_train(model, make_two_class_dataset(dims), steps=steps, seed=seed,
                      schedule=cfg.schedule)
    save_checkpoint(model, out_path)
    if loss_csv:
        with open(loss_csv, "w") as fh:
            fh.write("step,loss\n")
            for i, l in enumerate(trace):
                fh.write(f"{i},{l!r}\n")
    click.echo(f"trained {steps} steps -> {out_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--port", default=None, type=int)
@click.option("--seed", default=0, type=int)
@_guarded
def serve(config_path, port, seed):
    """Start the HTTP job service."""
    import uvicorn
    from morphix.service import create_app

    cfg = load_config(config_path)
    app = create_app(cfg)
    uvicorn.run(app, host="127.0.0.1", port=port or cfg.service.port, log_level="warning")


if __name__ == "__main__":
    main()
