// DOM wiring for the edit workbench.

import { MorphixApi } from './api'
import { SpectrogramCanvas, Tool } from './canvas'
import {
  EDIT_KINDS,
  TRANSFORM_FOR_KIND,
  buildRequest,
  drawSparkline,
  submitAndPoll,
  validateDraft,
} from './console'
import { MaskDraft } from './mask'
import { ABPlayer } from './player'
import { parseSpgHeader } from './spg'
import { SessionState } from './state'

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node as T
}

export function startApp(base: string): void {
  const api = new MorphixApi(base)
  const state = new SessionState()
  const canvas = new SpectrogramCanvas(el<HTMLCanvasElement>('spectro-canvas'))
  const player = new ABPlayer(
    el<HTMLImageElement>('ab-a'),
    el<HTMLImageElement>('ab-b'),
    el('ab-label'),
  )

  const status = el('status')
  const errors = el('errors')
  const submitBtn = el<HTMLButtonElement>('submit')
  const kindSelect = el<HTMLSelectElement>('kind')
  const alphaSlider = el<HTMLInputElement>('alpha')
  const alphaValue = el('alpha-value')

  for (const kind of EDIT_KINDS) {
    const opt = document.createElement('option')
    opt.value = kind
    opt.textContent = kind
    kindSelect.appendChild(opt)
  }

  function setStatus(text: string): void {
    status.textContent = text
  }

  function syncDraft(): void {
    state.draft.kind = kindSelect.value as typeof state.draft.kind
    state.draft.alpha = Number(alphaSlider.value)
    alphaValue.textContent = state.draft.alpha.toFixed(2)
    state.draft.wContent = Number(el<HTMLInputElement>('w-content').value)
    state.draft.wEdit = Number(el<HTMLInputElement>('w-edit').value)
    state.draft.eta = Number(el<HTMLInputElement>('eta').value)
    state.draft.steps = Number(el<HTMLInputElement>('steps').value)
    state.draft.seed = Number(el<HTMLInputElement>('seed').value)
    state.draft.transformAmount = Number(el<HTMLInputElement>('transform-amount').value)
    state.draft.maskC = canvas.draft
    const geometric = state.draft.kind in TRANSFORM_FOR_KIND
    el('reference-row').style.display = geometric ? 'none' : ''
    el('reference-out-row').style.display = state.draft.kind === 'replace' ? '' : 'none'
    el('transform-row').style.display = geometric ? '' : 'none'
    if (geometric) {
      state.draft.referenceId = null
      state.draft.referenceOutId = null
    }
    const problems = validateDraft(state.draft)
    errors.textContent = problems.join('; ')
    submitBtn.disabled = problems.length > 0
  }

  async function upload(input: HTMLInputElement, roleLabel: string):
      Promise<{ id: string; frames: number; bins: number } | null> {
    const file = input.files?.[0]
    if (!file) return null
    const bytes = await file.arrayBuffer()
    const asset = await api.uploadAsset(bytes, file.name)
    let frames = 0
    let bins = 0
    if (asset.kind === 'spectrogram') {
      const header = parseSpgHeader(bytes)
      frames = header.frames
      bins = header.bins
    }
    state.addAsset({ id: asset.id, kind: asset.kind, name: file.name, frames, bins })
    setStatus(`${roleLabel}: ${file.name} -> ${asset.id.slice(0, 12)}`)
    return { id: asset.id, frames, bins }
  }

  el<HTMLInputElement>('source-file').addEventListener('change', async (e) => {
    const info = await upload(e.target as HTMLInputElement, 'source')
    if (info) {
      state.draft.sourceId = info.id
      canvas.setAsset(api.renderUrl(info.id), info.frames || 64, info.bins || 64)
      syncDraft()
    }
  })
  el<HTMLInputElement>('reference-file').addEventListener('change', async (e) => {
    const info = await upload(e.target as HTMLInputElement, 'reference')
    if (info) {
      state.draft.referenceId = info.id
      state.draft.maskR = null
      syncDraft()
    }
  })
  el<HTMLInputElement>('reference-out-file').addEventListener('change', async (e) => {
    const info = await upload(e.target as HTMLInputElement, 'outgoing reference')
    if (info) {
      state.draft.referenceOutId = info.id
      syncDraft()
    }
  })

  for (const tool of ['draw', 'erase', 'pan'] as Tool[]) {
    el(`tool-${tool}`).addEventListener('click', () => {
      canvas.tool = tool
      setStatus(`tool: ${tool}`)
    })
  }
  el('mask-clear').addEventListener('click', () => {
    canvas.draft?.clear()
    canvas.render()
    syncDraft()
  })
  el('mask-export').addEventListener('click', () => {
    if (!canvas.draft || canvas.draft.isEmpty()) {
      errors.textContent = 'empty mask draft: draw a region before exporting'
      return
    }
    el<HTMLTextAreaElement>('mask-json').value =
      JSON.stringify(canvas.draft.toJSON(), null, 1)
  })
  el('mask-import').addEventListener('click', () => {
    try {
      const obj = JSON.parse(el<HTMLTextAreaElement>('mask-json').value)
      const draft = MaskDraft.fromJSON(obj)
      canvas.draft = draft
      canvas.render()
      syncDraft()
    } catch (err) {
      errors.textContent = `bad mask JSON: ${err}`
    }
  })

  canvas.onDraftChange = syncDraft
  kindSelect.addEventListener('change', syncDraft)
  for (const id of ['alpha', 'w-content', 'w-edit', 'eta', 'steps', 'seed', 'transform-amount']) {
    el(id).addEventListener('input', syncDraft)
  }

  submitBtn.addEventListener('click', async () => {
    syncDraft()
    try {
      setStatus('submitting...')
      const request = buildRequest(state.draft)
      const jobId = await api.submitEdit(request)
      setStatus(`job ${jobId.slice(0, 12)} running...`)
      const final = await api.pollJob(jobId, (s) => {
        setStatus(`job ${jobId.slice(0, 12)}: ${s.state}`)
        state.rememberJob(s)
      })
      if (final.state === 'failed') {
        errors.textContent = `job failed: ${final.error}`
        return
      }
      const trace = await api.getTrace(jobId)
      drawSparkline(el<HTMLCanvasElement>('sparkline'), trace)
      const result = final.result!
      await player.load(api, state.draft.sourceId!, result.spectrogram, null, result.waveform)
      state.abSelection = { source: state.draft.sourceId!, result: result.spectrogram }
      setStatus(`job done: result ${result.spectrogram.slice(0, 12)}`)
    } catch (err) {
      errors.textContent = String(err)
      setStatus('idle')
    }
  })

  el('ab-toggle').addEventListener('click', () => player.toggle())
  el('ab-play').addEventListener('click', () => player.play())
  el('ab-stop').addEventListener('click', () => player.stop())

  api.health().then((ok) => setStatus(ok ? 'service connected' : `service unreachable at ${base}`))
  syncDraft()
}

declare global {
  interface Window {
    __MORPHIX_BASE__?: string
  }
}

if (typeof document !== 'undefined' && document.getElementById('spectro-canvas')) {
  startApp(window.__MORPHIX_BASE__ ?? 'http://127.0.0.1:8765')
}
