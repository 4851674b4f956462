import { describe, expect, it } from 'vitest'
import { buildRequest, defaultDraft, sparklinePoints, validateDraft } from '../src/console'
import { MaskDraft } from '../src/mask'

function readyDraft() {
  const d = defaultDraft()
  d.sourceId = 'src-id'
  d.referenceId = 'ref-id'
  d.maskC = new MaskDraft(64, 64)
  d.maskC.addRect({ t0: 8, t1: 24, f0: 8, f1: 24 })
  return d
}

describe('draft validation', () => {
  it('accepts a complete add draft', () => {
    expect(validateDraft(readyDraft())).toEqual([])
  })

  it('add without a reference disables submission', () => {
    const d = readyDraft()
    d.referenceId = null
    expect(validateDraft(d).join(' ')).toMatch(/reference/)
  })

  it('replace requires an outgoing reference', () => {
    const d = readyDraft()
    d.kind = 'replace'
    expect(validateDraft(d).join(' ')).toMatch(/outgoing/)
    d.referenceOutId = 'out-id'
    expect(validateDraft(d)).toEqual([])
  })

  it('geometric kinds reject a reference and validate the transform', () => {
    const d = readyDraft()
    d.kind = 'move'
    expect(validateDraft(d).join(' ')).toMatch(/no reference/)
    d.referenceId = null
    expect(validateDraft(d)).toEqual([])
    d.kind = 'stretch'
    d.transformAmount = -1
    expect(validateDraft(d).join(' ')).toMatch(/factor/)
  })

  it('empty mask disables submission', () => {
    const d = readyDraft()
    d.maskC = new MaskDraft(64, 64)
    expect(validateDraft(d).join(' ')).toMatch(/mask/)
  })
})

describe('request building', () => {
  it('produces the server edit-request schema', () => {
    const req = buildRequest(readyDraft()) as Record<string, unknown>
    expect(req.kind).toBe('add')
    expect(req.source).toBe('src-id')
    expect(req.reference).toBe('ref-id')
    const mask = req.mask_c as { time_len: number; freq_len: number; rects: unknown[] }
    expect(mask.time_len).toBe(64)
    expect(mask.rects).toEqual([{ t0: 8, t1: 24, f0: 8, f1: 24 }])
    const sampler = req.sampler as Record<string, unknown>
    expect(sampler.schedule).toEqual({ T: 1000, shape: 'linear' })
    expect(req.weights).toEqual({ w_content: 1, w_edit: 1, eta: 1, layers: [0] })
  })

  it('geometric request carries a transform instead of a reference', () => {
    const d = readyDraft()
    d.kind = 'pitch_shift'
    d.referenceId = null
    d.transformAmount = 6
    const req = buildRequest(d) as Record<string, unknown>
    expect(req.transform).toEqual({ kind: 'translate_freq', amount: 6 })
    expect(req.reference).toBeUndefined()
  })

  it('throws on invalid drafts', () => {
    const d = readyDraft()
    d.sourceId = null
    expect(() => buildRequest(d)).toThrow(/source/)
  })
})

describe('sparkline', () => {
  it('maps a trace onto the box', () => {
    const pts = sparklinePoints([1, 3, 2], 100, 50)
    expect(pts).toHaveLength(3)
    expect(pts[0][0]).toBe(0)
    expect(pts[2][0]).toBe(100)
    expect(pts[0][1]).toBe(50) // min at the bottom
    expect(pts[1][1]).toBe(0) // max at the top
  })

  it('handles empty and constant traces', () => {
    expect(sparklinePoints([], 100, 50)).toEqual([])
    const pts = sparklinePoints([2, 2], 100, 50)
    expect(pts.every(([, y]) => Number.isFinite(y))).toBe(true)
  })
})
