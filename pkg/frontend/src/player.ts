// A/B comparison: synchronized playback toggle between the source and the
// edited result, with side-by-side renders. Falls back to render-only mode
// when a waveform is unavailable.

import { MorphixApi } from './api'

export class ABPlayer {
  active: 'a' | 'b' = 'a'
  audioAvailable = false

  private audioA: HTMLAudioElement | null = null
  private audioB: HTMLAudioElement | null = null

  constructor(
    readonly imgA: HTMLImageElement,
    readonly imgB: HTMLImageElement,
    readonly label: HTMLElement,
  ) {}

  // shared colormap scale so the two sides are visually comparable
  static readonly VMIN = Math.log(1e-5)
  static readonly VMAX = Math.log(1e-5) + 16

  async load(api: MorphixApi, sourceSpgId: string, resultSpgId: string,
             sourceWavId: string | null, resultWavId: string | null): Promise<void> {
    this.imgA.src = api.renderUrl(sourceSpgId, ABPlayer.VMIN, ABPlayer.VMAX)
    this.imgB.src = api.renderUrl(resultSpgId, ABPlayer.VMIN, ABPlayer.VMAX)
    this.stop()
    this.audioA = this.audioB = null
    this.audioAvailable = false
    if (sourceWavId && resultWavId && typeof Audio !== 'undefined') {
      this.audioA = new Audio(api.assetUrl(sourceWavId))
      this.audioB = new Audio(api.assetUrl(resultWavId))
      this.audioAvailable = true
    }
    this.active = 'a'
    this.updateLabel()
  }

  private current(): HTMLAudioElement | null {
    return this.active === 'a' ? this.audioA : this.audioB
  }

  private other(): HTMLAudioElement | null {
    return this.active === 'a' ? this.audioB : this.audioA
  }

  play(): void {
    this.current()?.play()
  }

  stop(): void {
    for (const a of [this.audioA, this.audioB]) {
      if (a) {
        a.pause()
        a.currentTime = 0
      }
    }
  }

  // Switch sides keeping the playhead position.
  toggle(): void {
    const from = this.current()
    const to = this.other()
    this.active = this.active === 'a' ? 'b' : 'a'
    if (from && to) {
      const pos = from.currentTime
      const wasPlaying = !from.paused
      from.pause()
      to.currentTime = pos
      if (wasPlaying) to.play()
    }
    this.updateLabel()
  }

  private updateLabel(): void {
    this.label.textContent = this.active === 'a' ? 'A: source' : 'B: result'
  }
}
