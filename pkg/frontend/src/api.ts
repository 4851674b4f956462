// Thin client over the edit service's HTTP API.

export interface AssetRef {
  id: string
  kind: string
}

export interface JobState {
  id: string
  state: 'queued' | 'running' | 'done' | 'failed'
  result?: { spectrogram: string; waveform: string; provenance?: unknown }
  error?: string
}

export class MorphixApi {
  constructor(readonly base: string) {}

  assetUrl(id: string): string {
    return `${this.base}/assets/${id}`
  }

  renderUrl(id: string, vmin?: number, vmax?: number): string {
    const url = `${this.base}/assets/${id}/render.png`
    if (vmin === undefined || vmax === undefined) return url
    return `${url}?vmin=${vmin}&vmax=${vmax}`
  }

  async health(): Promise<boolean> {
    try {
      const r = await fetch(`${this.base}/health`)
      return r.ok
    } catch {
      return false
    }
  }

  async uploadAsset(data: Blob | ArrayBuffer, filename: string): Promise<AssetRef> {
    const body = new FormData()
    const blob = data instanceof Blob ? data : new Blob([data])
    body.append('file', blob, filename)
    const r = await fetch(`${this.base}/assets`, { method: 'POST', body })
    if (!r.ok) throw new Error(`upload failed: ${r.status} ${await r.text()}`)
    return (await r.json()) as AssetRef
  }

  async fetchAsset(id: string): Promise<ArrayBuffer> {
    const r = await fetch(this.assetUrl(id))
    if (!r.ok) throw new Error(`asset ${id}: ${r.status}`)
    return r.arrayBuffer()
  }

  async submitEdit(request: object, idempotencyKey?: string): Promise<string> {
    const headers: Record<string, string> = { 'content-type': 'application/json' }
    if (idempotencyKey) headers['idempotency-key'] = idempotencyKey
    const r = await fetch(`${this.base}/edits`, {
      method: 'POST',
      headers,
      body: JSON.stringify(request),
    })
    if (!r.ok) throw new Error(`submit failed: ${r.status} ${await r.text()}`)
    return ((await r.json()) as { job_id: string }).job_id
  }

  async getJob(jobId: string): Promise<JobState> {
    const r = await fetch(`${this.base}/edits/${jobId}`)
    if (!r.ok) throw new Error(`job ${jobId}: ${r.status}`)
    return (await r.json()) as JobState
  }

  async getTrace(jobId: string): Promise<number[]> {
    const r = await fetch(`${this.base}/edits/${jobId}/trace`)
    if (!r.ok) return []
    const text = await r.text()
    return text
      .split('\n')
      .slice(1)
      .filter((line) => line.includes(','))
      .map((line) => Number(line.split(',')[1]))
      .filter((x) => Number.isFinite(x))
  }

  // 500 ms polling with gentle backoff, deduplicated per job id.
  private polls = new Map<string, Promise<JobState>>()

  pollJob(jobId: string, onUpdate?: (s: JobState) => void): Promise<JobState> {
    const existing = this.polls.get(jobId)
    if (existing) return existing
    const run = (async () => {
      let interval = 500
      for (;;) {
        const state = await this.getJob(jobId)
        onUpdate?.(state)
        if (state.state === 'done' || state.state === 'failed') {
          this.polls.delete(jobId)
          return state
        }
        await new Promise((resolve) => setTimeout(resolve, interval))
        interval = Math.min(interval * 1.5, 4000)
      }
    })()
    this.polls.set(jobId, run)
    return run
  }
}
