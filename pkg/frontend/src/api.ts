/**
 * Client for the voxseg HTTP API.
 *
 * All non-image bodies are key-value text documents ("key value" per line);
 * errors carry a machine-readable `code` plus `message`, surfaced here as
 * ApiError. The fetch implementation is injectable for tests.
 */

export type KvDoc = Record<string, string>;

export function parseKv(text: string): KvDoc {
  const doc: KvDoc = {};
  for (const raw of text.split('\n')) {
    const line = raw.trim();
    if (!line || line.startsWith('#')) continue;
    const space = line.indexOf(' ');
    if (space < 0) throw new Error(`malformed key-value line: ${line}`);
    doc[line.slice(0, space)] = line.slice(space + 1);
  }
  return doc;
}

export function formatKv(doc: KvDoc): string {
  return Object.entries(doc).map(([k, v]) => `${k} ${v}`).join('\n') + '\n';
}

export interface Seed {
  x: number;
  y: number;
  z: number;
  label: 1 | -1;
}

export function formatSeeds(seeds: Seed[]): string {
  return seeds
    .map((s) => `${s.x} ${s.y} ${s.z} ${s.label > 0 ? '+1' : '-1'}`)
    .join('\n') + (seeds.length ? '\n' : '');
}

export interface SessionStatus {
  id: string;
  state: 'idle' | 'training' | 'classifying';
  progress: number;
  iteration: number;
  levels: number;
  dims: [number, number, number];
  seeds: number;
  pending: number;
  layers: string[];
  error?: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface CreateSessionOptions {
  volume?: string;
  checkpoint?: string;
  features?: string[];
  envSize?: number;
  delta?: number;
  levels?: number;
}

async function raiseOnError(response: Response): Promise<Response> {
  if (response.ok) return response;
  let code = 'http_error';
  let message = `HTTP ${response.status}`;
  try {
    const doc = parseKv(await response.text());
    if (doc.code) code = doc.code;
    if (doc.message) message = doc.message;
  } catch {
    // non-kv error body; keep the generic message
  }
  throw new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(
    readonly base: string = '',
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async createSession(options: CreateSessionOptions): Promise<string> {
    const body: KvDoc = {};
    if (options.checkpoint) body.checkpoint = options.checkpoint;
    if (options.volume) body.volume = options.volume;
    if (options.features) body.features = options.features.join(',');
    if (options.envSize !== undefined) body.env_size = String(options.envSize);
    if (options.delta !== undefined) body.delta = String(options.delta);
    if (options.levels !== undefined) body.levels = String(options.levels);
    const response = await raiseOnError(
      await this.fetchFn(this.url('/sessions'), {
        method: 'POST',
        body: formatKv(body),
      }),
    );
    return parseKv(await response.text()).id;
  }

  async status(id: string): Promise<SessionStatus> {
    const response = await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}/status`)),
    );
    const doc = parseKv(await response.text());
    const dims = doc.dims.split(' ').map(Number);
    return {
      id: doc.id,
      state: doc.state as SessionStatus['state'],
      progress: Number(doc.progress),
      iteration: Number(doc.iteration),
      levels: Number(doc.levels),
      dims: [dims[0], dims[1], dims[2]],
      seeds: Number(doc.seeds),
      pending: Number(doc.pending),
      layers: doc.layers === '-' ? [] : doc.layers.split(','),
      error: doc.error,
    };
  }

  sliceUrl(
    id: string,
    axis: 'x' | 'y' | 'z',
    index: number,
    layer: string,
    window?: { min: number; max: number },
  ): string {
    let url = `${this.base}/sessions/${id}/slice?axis=${axis}&index=${index}&layer=${layer}`;
    if (window) url += `&min=${window.min}&max=${window.max}`;
    return url;
  }

  async fetchSlice(
    id: string,
    axis: 'x' | 'y' | 'z',
    index: number,
    layer: string,
    window?: { min: number; max: number },
  ): Promise<Uint8Array> {
    const response = await raiseOnError(
      await this.fetchFn(this.sliceUrl(id, axis, index, layer, window).replace(this.base, this.base)),
    );
    return new Uint8Array(await response.arrayBuffer());
  }

  async postSeeds(id: string, seeds: Seed[]): Promise<{ accepted: number; rejected: number }> {
    const response = await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}/seeds`), {
        method: 'POST',
        body: formatSeeds(seeds),
      }),
    );
    const doc = parseKv(await response.text());
    return { accepted: Number(doc.accepted), rejected: Number(doc.rejected) };
  }

  async iterate(id: string): Promise<void> {
    await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}/iterate`), { method: 'POST' }),
    );
  }

  async exportSeeds(id: string): Promise<string> {
    const response = await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}/export?what=seeds`)),
    );
    return response.text();
  }

  async exportBytes(id: string, what: 'confidence' | 'uncertainty' | 'model'): Promise<Uint8Array> {
    const response = await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}/export?what=${what}`)),
    );
    return new Uint8Array(await response.arrayBuffer());
  }

  async deleteSession(id: string): Promise<void> {
    await raiseOnError(
      await this.fetchFn(this.url(`/sessions/${id}`), { method: 'DELETE' }),
    );
  }
}
