// Edit console: request building, client-side validation mirroring the
// server's rules, submission and polling, energy-trace sparkline.

import { MorphixApi, JobState } from './api'
import { MaskDraft, MaskJson } from './mask'

export const EDIT_KINDS = ['add', 'remove', 'replace', 'move', 'stretch', 'pitch_shift'] as const
export type EditKind = (typeof EDIT_KINDS)[number]

export const TRANSFORM_FOR_KIND: Record<string, string> = {
  move: 'translate_time',
  stretch: 'scale_time',
  pitch_shift: 'translate_freq',
}

export interface ConsoleDraft {
  kind: EditKind
  sourceId: string | null
  referenceId: string | null
  referenceOutId: string | null
  maskC: MaskDraft | null
  maskR: MaskJson | null
  alpha: number
  wContent: number
  wEdit: number
  eta: number
  layers: number[]
  steps: number
  seed: number
  transformAmount: number
}

export function defaultDraft(): ConsoleDraft {
  return {
    kind: 'add',
    sourceId: null,
    referenceId: null,
    referenceOutId: null,
    maskC: null,
    maskR: null,
    alpha: 0.5,
    wContent: 1.0,
    wEdit: 1.0,
    eta: 1.0,
    layers: [0],
    steps: 25,
    seed: 0,
    transformAmount: 8,
  }
}

export function validateDraft(d: ConsoleDraft): string[] {
  const errors: string[] = []
  if (!d.sourceId) errors.push('load a source asset')
  if (!d.maskC || d.maskC.isEmpty()) errors.push('draw a non-empty edit mask')
  const geometric = d.kind in TRANSFORM_FOR_KIND
  if (geometric) {
    if (d.referenceId) errors.push(`${d.kind} takes no reference`)
    if (d.kind === 'stretch' && d.transformAmount <= 0) {
      errors.push('stretch factor must be > 0')
    }
    if (d.kind !== 'stretch' && !Number.isInteger(d.transformAmount)) {
      errors.push('translation amount must be an integer cell count')
    }
  } else {
    if (!d.referenceId) errors.push(`${d.kind} requires a reference asset`)
    if (d.kind === 'replace' && !d.referenceOutId) {
      errors.push('replace requires an outgoing reference')
    }
  }
  if (d.alpha < 0 || d.alpha > 1) errors.push('alpha must be in [0, 1]')
  return errors
}

export function buildRequest(d: ConsoleDraft): object {
  const errors = validateDraft(d)
  if (errors.length) throw new Error(errors.join('; '))
  const req: Record<string, unknown> = {
    kind: d.kind,
    source: d.sourceId,
    mask_c: d.maskC!.toJSON(),
    alpha: d.alpha,
    weights: { w_content: d.wContent, w_edit: d.wEdit, eta: d.eta, layers: d.layers },
    sampler: {
      steps: d.steps,
      eta: 0.0,
      cfg_scale: 1.0,
      seed: d.seed,
      schedule: { T: 1000, shape: 'linear' },
    },
  }
  if (d.kind in TRANSFORM_FOR_KIND) {
    req.transform = { kind: TRANSFORM_FOR_KIND[d.kind], amount: d.transformAmount }
  } else {
    req.reference = d.referenceId
    if (d.maskR) req.mask_r = d.maskR
    if (d.kind === 'replace') req.reference_out = d.referenceOutId
  }
  return req
}

export async function submitAndPoll(
  api: MorphixApi,
  d: ConsoleDraft,
  onUpdate?: (s: JobState) => void,
): Promise<JobState> {
  const jobId = await api.submitEdit(buildRequest(d))
  return api.pollJob(jobId, onUpdate)
}

// Polyline points for a fixed-size sparkline of the energy trace.
export function sparklinePoints(values: number[], width: number, height: number): [number, number][] {
  if (values.length === 0) return []
  const lo = Math.min(...values)
  const hi = Math.max(...values)
  const span = hi - lo || 1
  return values.map((v, i) => {
    const x = values.length === 1 ? width / 2 : (i / (values.length - 1)) * width
    const y = height - ((v - lo) / span) * height
    return [x, y]
  })
}

export function drawSparkline(canvas: HTMLCanvasElement, values: number[]): void {
  const ctx = canvas.getContext('2d')
  if (!ctx) return
  ctx.clearRect(0, 0, canvas.width, canvas.height)
  const pts = sparklinePoints(values, canvas.width, canvas.height - 2)
  if (pts.length < 2) return
  ctx.strokeStyle = '#50c0ff'
  ctx.lineWidth = 1
  ctx.beginPath()
  ctx.moveTo(pts[0][0], pts[0][1] + 1)
  for (const [x, y] of pts.slice(1)) ctx.lineTo(x, y + 1)
  ctx.stroke()
}
