// Session state: loaded assets, the request draft, and the job list.
// The job list mirrors server truth on refresh.

import { JobState, MorphixApi } from './api'
import { ConsoleDraft, defaultDraft } from './console'

export interface LoadedAsset {
  id: string
  kind: string
  name: string
  frames?: number
  bins?: number
}

export class SessionState {
  assets: LoadedAsset[] = []
  jobs: JobState[] = []
  draft: ConsoleDraft = defaultDraft()
  abSelection: { source: string; result: string } | null = null

  addAsset(asset: LoadedAsset): void {
    if (!this.assets.some((a) => a.id === asset.id)) {
      this.assets.push(asset)
    }
  }

  rememberJob(job: JobState): void {
    const i = this.jobs.findIndex((j) => j.id === job.id)
    if (i >= 0) this.jobs[i] = job
    else this.jobs.push(job)
  }

  async refreshJobs(api: MorphixApi): Promise<void> {
    const updated: JobState[] = []
    for (const job of this.jobs) {
      try {
        updated.push(await api.getJob(job.id))
      } catch {
        // job unknown to the server: drop it
      }
    }
    this.jobs = updated
  }
}
