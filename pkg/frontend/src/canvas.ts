// Spectrogram viewer with pan/zoom and rectangle mask drawing.
//
// Screen mapping: a spectrogram cell (t, f) occupies a cellW x cellH box;
// time runs right, frequency runs up (row 0 of the render PNG is the top
// bin). All pointer math goes through cellAt so drawing the same region
// yields the same cells at any zoom.

import { MaskDraft, Rect } from './mask'

export type Tool = 'draw' | 'erase' | 'pan'

export class SpectrogramCanvas {
  zoom = 1
  panX = 0
  panY = 0
  tool: Tool = 'draw'
  frames = 0
  bins = 0
  draft: MaskDraft | null = null
  onDraftChange: (() => void) | null = null

  private image: HTMLImageElement | null = null
  private baseCell = 8 // css pixels per cell at zoom 1
  private dragStart: { t: number; f: number } | null = null
  private dragCurrent: { t: number; f: number } | null = null
  private panAnchor: { x: number; y: number; panX: number; panY: number } | null = null

  constructor(readonly canvas: HTMLCanvasElement) {
    canvas.addEventListener('pointerdown', (e) => this.onDown(e))
    canvas.addEventListener('pointermove', (e) => this.onMove(e))
    canvas.addEventListener('pointerup', (e) => this.onUp(e))
    canvas.addEventListener('wheel', (e) => this.onWheel(e), { passive: false })
  }

  setAsset(imageUrl: string | null, frames: number, bins: number): void {
    this.frames = frames
    this.bins = bins
    this.draft = new MaskDraft(frames, bins)
    this.image = null
    if (imageUrl && typeof Image !== 'undefined') {
      const img = new Image()
      img.onload = () => {
        this.image = img
        this.render()
      }
      img.src = imageUrl
    }
    this.render()
  }

  get cellW(): number {
    return this.baseCell * this.zoom
  }

  get cellH(): number {
    return this.baseCell * this.zoom
  }

  // Inverse of the cell -> screen transform; the heart of "same cells at
  // any zoom".
  cellAt(screenX: number, screenY: number): { t: number; f: number } {
    const t = Math.floor((screenX - this.panX) / this.cellW)
    const row = Math.floor((screenY - this.panY) / this.cellH)
    return { t, f: this.bins - 1 - row }
  }

  cellOrigin(t: number, f: number): { x: number; y: number } {
    return {
      x: this.panX + t * this.cellW,
      y: this.panY + (this.bins - 1 - f) * this.cellH,
    }
  }

  setZoom(zoom: number, centerX = 0, centerY = 0): void {
    const before = this.cellAt(centerX, centerY)
    this.zoom = Math.min(16, Math.max(0.25, zoom))
    const origin = this.cellOrigin(before.t, before.f)
    this.panX += centerX - origin.x
    this.panY += centerY - origin.y
    this.render()
  }

  private pos(e: PointerEvent | WheelEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect()
    return { x: e.clientX - rect.left, y: e.clientY - rect.top }
  }

  private onDown(e: PointerEvent): void {
    const { x, y } = this.pos(e)
    if (this.tool === 'pan' || e.button === 1) {
      this.panAnchor = { x, y, panX: this.panX, panY: this.panY }
      return
    }
    if (!this.draft) return
    this.dragStart = this.cellAt(x, y)
    this.dragCurrent = this.dragStart
  }

  private onMove(e: PointerEvent): void {
    const { x, y } = this.pos(e)
    if (this.panAnchor) {
      this.panX = this.panAnchor.panX + (x - this.panAnchor.x)
      this.panY = this.panAnchor.panY + (y - this.panAnchor.y)
      this.render()
      return
    }
    if (this.dragStart) {
      this.dragCurrent = this.cellAt(x, y)
      this.render()
    }
  }

  private onUp(e: PointerEvent): void {
    if (this.panAnchor) {
      this.panAnchor = null
      return
    }
    if (!this.dragStart || !this.draft) return
    const { x, y } = this.pos(e)
    const end = this.cellAt(x, y)
    const rect = this.dragRect(this.dragStart, end)
    if (this.tool === 'erase') this.draft.eraseRect(rect)
    else this.draft.addRect(rect)
    this.dragStart = null
    this.dragCurrent = null
    this.onDraftChange?.()
    this.render()
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault()
    const { x, y } = this.pos(e)
    this.setZoom(this.zoom * (e.deltaY < 0 ? 1.25 : 0.8), x, y)
  }

  // Half-open rect covering both corner cells (clipping happens in the draft).
  dragRect(a: { t: number; f: number }, b: { t: number; f: number }): Rect {
    return {
      t0: Math.min(a.t, b.t),
      t1: Math.max(a.t, b.t) + 1,
      f0: Math.min(a.f, b.f),
      f1: Math.max(a.f, b.f) + 1,
    }
  }

  render(): void {
    const ctx = this.canvas.getContext('2d')
    if (!ctx) return // headless test environments have no 2d context
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height)
    if (this.image) {
      ctx.imageSmoothingEnabled = false
      ctx.drawImage(this.image, this.panX, this.panY,
        this.frames * this.cellW, this.bins * this.cellH)
    }
    if (this.draft) {
      ctx.fillStyle = 'rgba(255, 255, 255, 0.45)'
      const json = this.draft.toJSON()
      for (const r of json.rects) {
        const a = this.cellOrigin(r.t0, r.f1 - 1)
        ctx.fillRect(a.x, a.y, (r.t1 - r.t0) * this.cellW, (r.f1 - r.f0) * this.cellH)
      }
    }
    if (this.dragStart && this.dragCurrent) {
      const r = this.dragRect(this.dragStart, this.dragCurrent)
      const a = this.cellOrigin(r.t0, r.f1 - 1)
      ctx.strokeStyle = this.tool === 'erase' ? '#ff5050' : '#50c0ff'
      ctx.lineWidth = 1.5
      ctx.strokeRect(a.x, a.y, (r.t1 - r.t0) * this.cellW, (r.f1 - r.f0) * this.cellH)
    }
  }
}
