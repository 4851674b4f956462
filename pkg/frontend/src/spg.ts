// Minimal SPG1 reader/writer, enough to discover grid dims client-side
// and to synthesize fixtures in tests.

export interface SpgHeader {
  frames: number
  bins: number
  hop: number
  nFft: number
  sampleRate: number
}

const MAGIC = 0x31475053 // "SPG1" little-endian

export function parseSpgHeader(data: ArrayBuffer): SpgHeader {
  const view = new DataView(data)
  if (data.byteLength < 28 || view.getUint32(0, true) !== MAGIC) {
    throw new Error('not an SPG1 file')
  }
  const version = view.getUint32(4, true)
  if (version !== 1) throw new Error(`unsupported SPG version ${version}`)
  return {
    frames: view.getUint32(8, true),
    bins: view.getUint32(12, true),
    hop: view.getUint32(16, true),
    nFft: view.getUint32(20, true),
    sampleRate: view.getUint32(24, true),
  }
}

export function encodeSpg(header: SpgHeader, values: Float32Array): ArrayBuffer {
  if (values.length !== header.frames * header.bins) {
    throw new Error('value count does not match dims')
  }
  const out = new ArrayBuffer(28 + 4 * values.length)
  const view = new DataView(out)
  view.setUint32(0, MAGIC, true)
  view.setUint32(4, 1, true)
  view.setUint32(8, header.frames, true)
  view.setUint32(12, header.bins, true)
  view.setUint32(16, header.hop, true)
  view.setUint32(20, header.nFft, true)
  view.setUint32(24, header.sampleRate, true)
  new Float32Array(out, 28).set(values)
  return out
}
