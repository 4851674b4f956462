// Rectangle-based time-frequency mask drafting.
//
// The draft keeps a per-cell bitset so erase works, and serializes to the
// server's rectangle-union JSON by merging row runs, so export -> import
// reproduces the exact cell set.

export interface Rect {
  t0: number
  t1: number
  f0: number
  f1: number
}

export interface MaskJson {
  time_len: number
  freq_len: number
  rects: Rect[]
}

export class MaskDraft {
  readonly timeLen: number
  readonly freqLen: number
  private bits: Uint8Array

  constructor(timeLen: number, freqLen: number) {
    if (timeLen < 1 || freqLen < 1) {
      throw new Error(`mask dims must be positive, got ${timeLen}x${freqLen}`)
    }
    this.timeLen = timeLen
    this.freqLen = freqLen
    this.bits = new Uint8Array(timeLen * freqLen)
  }

  private idx(t: number, f: number): number {
    return t * this.freqLen + f
  }

  get(t: number, f: number): boolean {
    return this.bits[this.idx(t, f)] !== 0
  }

  clipRect(r: Rect): Rect | null {
    const t0 = Math.max(0, Math.min(r.t0, r.t1))
    const t1 = Math.min(this.timeLen, Math.max(r.t0, r.t1))
    const f0 = Math.max(0, Math.min(r.f0, r.f1))
    const f1 = Math.min(this.freqLen, Math.max(r.f0, r.f1))
    if (t1 <= t0 || f1 <= f0) return null
    return { t0, t1, f0, f1 }
  }

  private paint(r: Rect, value: number): void {
    const c = this.clipRect(r)
    if (!c) return
    for (let t = c.t0; t < c.t1; t++) {
      this.bits.fill(value, this.idx(t, c.f0), this.idx(t, c.f1))
    }
  }

  addRect(r: Rect): void {
    this.paint(r, 1)
  }

  eraseRect(r: Rect): void {
    this.paint(r, 0)
  }

  clear(): void {
    this.bits.fill(0)
  }

  popcount(): number {
    let n = 0
    for (const b of this.bits) n += b
    return n
  }

  isEmpty(): boolean {
    return this.popcount() === 0
  }

  cellSet(): Set<number> {
    const out = new Set<number>()
    for (let i = 0; i < this.bits.length; i++) {
      if (this.bits[i]) out.add(i)
    }
    return out
  }

  // Decompose the bitset into rects by merging identical row runs across
  // consecutive time rows (mirrors the server's encoder).
  toJSON(): MaskJson {
    const rects: Rect[] = []
    const open = new Map<string, number>() // "f0,f1" -> t0
    for (let t = 0; t <= this.timeLen; t++) {
      const runs = new Set<string>()
      if (t < this.timeLen) {
        let f = 0
        while (f < this.freqLen) {
          if (this.get(t, f)) {
            const f0 = f
            while (f < this.freqLen && this.get(t, f)) f++
            runs.add(`${f0},${f}`)
          } else {
            f++
          }
        }
      }
      for (const [span, t0] of [...open]) {
        if (!runs.has(span)) {
          const [f0, f1] = span.split(',').map(Number)
          rects.push({ t0, t1: t, f0, f1 })
          open.delete(span)
        }
      }
      for (const span of runs) {
        if (!open.has(span)) open.set(span, t)
      }
    }
    rects.sort((a, b) => a.t0 - b.t0 || a.f0 - b.f0 || a.t1 - b.t1 || a.f1 - b.f1)
    return { time_len: this.timeLen, freq_len: this.freqLen, rects }
  }

  static fromJSON(obj: MaskJson): MaskDraft {
    const draft = new MaskDraft(obj.time_len, obj.freq_len)
    for (const r of obj.rects) {
      if (r.t0 < 0 || r.t1 > obj.time_len || r.f0 < 0 || r.f1 > obj.freq_len) {
        throw new Error(`rect out of bounds: ${JSON.stringify(r)}`)
      }
      draft.addRect(r)
    }
    return draft
  }
}
