// End-to-end flow against a live edit service: upload, draw, submit, poll
// to done, fetch the render and the WAV, and check the identity-edit
// screenshot bound. The service is spawned from the Python package in this
// repository. Runs headless (happy-dom); a real-browser variant lives in
// browser.spec.ts and engages when a browser binary is available.

import { spawn, ChildProcess } from 'node:child_process'
import { mkdtempSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join, resolve } from 'node:path'
import { PNG } from 'pngjs'
import { afterAll, beforeAll, describe, expect, it } from 'vitest'

import { MorphixApi } from '../src/api'
import { SpectrogramCanvas } from '../src/canvas'
import { defaultDraft, submitAndPoll } from '../src/console'
import { encodeSpg } from '../src/spg'

const PORT = 8931
const BASE = `http://127.0.0.1:${PORT}`
let service: ChildProcess | null = null

function makeFixtures(): { source: ArrayBuffer; reference: ArrayBuffer } {
  // smooth quiet background with one bright event on the reference
  const frames = 64
  const bins = 64
  const floor = Math.log(1e-5)
  const src = new Float32Array(frames * bins)
  const ref = new Float32Array(frames * bins)
  for (let t = 0; t < frames; t++) {
    for (let f = 0; f < bins; f++) {
      src[t * bins + f] = floor + 1.5 + 0.4 * Math.sin(t / 9) * Math.cos(f / 7)
      ref[t * bins + f] = floor
    }
  }
  for (let t = 20; t < 40; t++) {
    for (let f = 24; f < 30; f++) {
      ref[t * bins + f] = 1.4
    }
  }
  const header = { frames, bins, hop: 32, nFft: 126, sampleRate: 16000 }
  return { source: encodeSpg(header, src), reference: encodeSpg(header, ref) }
}

function drawRect(sc: SpectrogramCanvas, t0: number, f0: number, t1: number, f1: number): void {
  const a = sc.cellOrigin(t0, f0)
  const b = sc.cellOrigin(t1, f1)
  sc.canvas.dispatchEvent(new PointerEvent('pointerdown',
    { clientX: a.x + 1, clientY: a.y + 1, bubbles: true }))
  sc.canvas.dispatchEvent(new PointerEvent('pointerup',
    { clientX: b.x + 1, clientY: b.y + 1, bubbles: true }))
}

function makeCanvas(): SpectrogramCanvas {
  const el = document.createElement('canvas')
  el.width = 640
  el.height = 560
  el.getBoundingClientRect = () =>
    ({ left: 0, top: 0, right: 640, bottom: 560, width: 640, height: 560, x: 0, y: 0,
       toJSON: () => ({}) }) as DOMRect
  return new SpectrogramCanvas(el)
}

beforeAll(async () => {
  const repoRoot = resolve(__dirname, '..', '..')
  const dataDir = mkdtempSync(join(tmpdir(), 'morphix-e2e-'))
  service = spawn('python3', ['-m', 'morphix.cli', 'serve', '--port', String(PORT)], {
    cwd: repoRoot,
    env: {
      ...process.env,
      PYTHONPATH: join(repoRoot, 'src'),
      MORPHIX_DATA_DIR: dataDir,
    },
    stdio: 'ignore',
  })
  const api = new MorphixApi(BASE)
  const deadline = Date.now() + 60_000
  while (Date.now() < deadline) {
    if (await api.health()) return
    await new Promise((r) => setTimeout(r, 300))
  }
  throw new Error('service did not come up')
})

afterAll(() => {
  service?.kill()
})

describe('live service flow', () => {
  const api = new MorphixApi(BASE)
  const fixtures = makeFixtures()

  it('upload, draw, submit, poll to done, fetch render and WAV', async () => {
    const source = await api.uploadAsset(fixtures.source, 'source.spg')
    const reference = await api.uploadAsset(fixtures.reference, 'reference.spg')
    expect(source.kind).toBe('spectrogram')

    const sc = makeCanvas()
    sc.setAsset(api.renderUrl(source.id), 64, 64)
    drawRect(sc, 20, 24, 39, 29)
    expect(sc.draft!.isEmpty()).toBe(false)

    const draft = defaultDraft()
    draft.sourceId = source.id
    draft.referenceId = reference.id
    draft.maskC = sc.draft
    draft.maskR = sc.draft!.toJSON()
    draft.steps = 15
    const states: string[] = []
    const final = await submitAndPoll(api, draft, (s) => states.push(s.state))
    expect(final.state).toBe('done')
    expect(states.length).toBeGreaterThan(0)

    const png = await fetch(api.renderUrl(final.result!.spectrogram))
    expect(png.status).toBe(200)
    const pngBytes = new Uint8Array(await png.arrayBuffer())
    expect([...pngBytes.slice(0, 4)]).toEqual([0x89, 0x50, 0x4e, 0x47])

    const wav = await fetch(api.assetUrl(final.result!.waveform))
    expect(wav.status).toBe(200)
    const wavBytes = new Uint8Array(await wav.arrayBuffer())
    expect(String.fromCharCode(...wavBytes.slice(0, 4))).toBe('RIFF')

    const trace = await api.getTrace(final.id)
    expect(Array.isArray(trace)).toBe(true)
  })

  it('identity edit (alpha=0, guidance off) renders within 1% of the source', async () => {
    const source = await api.uploadAsset(fixtures.source, 'source.spg')
    const reference = await api.uploadAsset(fixtures.reference, 'reference.spg')

    const sc = makeCanvas()
    sc.setAsset(null, 64, 64)
    drawRect(sc, 20, 24, 39, 29)

    const draft = defaultDraft()
    draft.sourceId = source.id
    draft.referenceId = reference.id
    draft.maskC = sc.draft
    draft.alpha = 0.0
    draft.eta = 0.0
    draft.wContent = 0.0
    draft.wEdit = 0.0
    draft.steps = 25
    const final = await submitAndPoll(api, draft)
    expect(final.state).toBe('done')

    const [a, b] = await Promise.all([
      fetch(api.renderUrl(source.id)).then((r) => r.arrayBuffer()),
      fetch(api.renderUrl(final.result!.spectrogram)).then((r) => r.arrayBuffer()),
    ])
    const pa = PNG.sync.read(Buffer.from(a))
    const pb = PNG.sync.read(Buffer.from(b))
    expect([pb.width, pb.height]).toEqual([pa.width, pa.height])
    let total = 0
    for (let i = 0; i < pa.data.length; i++) {
      total += Math.abs(pa.data[i] - pb.data[i])
    }
    const meanDiff = total / pa.data.length / 255
    expect(meanDiff).toBeLessThanOrEqual(0.01)
  })

  it('job list reflects server truth on refresh', async () => {
    const { SessionState } = await import('../src/state')
    const state = new SessionState()
    state.rememberJob({ id: 'nonexistent', state: 'queued' })
    await state.refreshJobs(api)
    expect(state.jobs).toHaveLength(0)
  })
})
