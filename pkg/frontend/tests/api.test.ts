import { describe, expect, it, vi } from 'vitest';

import { ApiClient, ApiError, formatKv, formatSeeds, parseKv } from '../src/api.js';

function response(status: number, body: string | ArrayBuffer): Response {
  return new Response(body, { status });
}

describe('kv codec', () => {
  it('round-trips documents', () => {
    const doc = { dims: '4 5 6', dtype: 'u8', note: 'hello world' };
    expect(parseKv(formatKv(doc))).toEqual(doc);
  });

  it('skips comments and blank lines', () => {
    expect(parseKv('# header\n\nkey some value\n')).toEqual({ key: 'some value' });
  });

  it('rejects orphan keys', () => {
    expect(() => parseKv('orphan\n')).toThrow(/malformed/);
  });
});

describe('seed formatting', () => {
  it('matches the seed-file format byte for byte', () => {
    const text = formatSeeds([
      { x: 1, y: 2, z: 3, label: 1 },
      { x: 7, y: 0, z: 9, label: -1 },
    ]);
    expect(text).toBe('1 2 3 +1\n7 0 9 -1\n');
  });

  it('emits nothing for an empty batch', () => {
    expect(formatSeeds([])).toBe('');
  });
});

describe('ApiClient', () => {
  it('creates sessions from kv bodies', async () => {
    const fetchFn = vi.fn(async (url: string, init?: RequestInit) => {
      expect(url).toBe('/sessions');
      expect(init?.method).toBe('POST');
      const body = parseKv(String(init?.body));
      expect(body.volume).toBe('/data/vol');
      expect(body.features).toBe('moments,inertia');
      expect(body.env_size).toBe('5');
      return response(201, 'id abc123\n');
    });
    const client = new ApiClient('', fetchFn);
    const id = await client.createSession({
      volume: '/data/vol',
      features: ['moments', 'inertia'],
      envSize: 5,
    });
    expect(id).toBe('abc123');
  });

  it('parses status documents', async () => {
    const body = [
      'id abc', 'state idle', 'progress 0.5', 'iteration 2', 'levels 1',
      'delta 1.0', 'dims 24 32 48', 'seeds 6', 'pending 1',
      'layers confidence,uncertainty',
    ].join('\n') + '\n';
    const client = new ApiClient('', async () => response(200, body));
    const status = await client.status('abc');
    expect(status.state).toBe('idle');
    expect(status.dims).toEqual([24, 32, 48]);
    expect(status.layers).toEqual(['confidence', 'uncertainty']);
    expect(status.progress).toBe(0.5);
  });

  it('treats "-" as no layers', async () => {
    const body = 'id a\nstate idle\nprogress 0\niteration 0\nlevels 1\n'
      + 'delta 1\ndims 4 4 4\nseeds 0\npending 0\nlayers -\n';
    const client = new ApiClient('', async () => response(200, body));
    expect((await client.status('a')).layers).toEqual([]);
  });

  it('builds slice urls with optional windows', () => {
    const client = new ApiClient('http://host');
    expect(client.sliceUrl('s', 'z', 7, 'gray')).toBe(
      'http://host/sessions/s/slice?axis=z&index=7&layer=gray');
    expect(client.sliceUrl('s', 'x', 0, 'confidence', { min: 0, max: 100 })).toBe(
      'http://host/sessions/s/slice?axis=x&index=0&layer=confidence&min=0&max=100');
  });

  it('surfaces kv errors as ApiError with code', async () => {
    const client = new ApiClient(
      '', async () => response(409, 'code busy\nmessage a job is running\n'));
    await expect(client.iterate('s')).rejects.toMatchObject({
      status: 409,
      code: 'busy',
    });
    try {
      await client.iterate('s');
    } catch (error) {
      expect(error).toBeInstanceOf(ApiError);
    }
  });

  it('posts seeds and parses outcome counts', async () => {
    const fetchFn = vi.fn(async (_url: string, init?: RequestInit) => {
      expect(String(init?.body)).toBe('1 2 3 +1\n');
      return response(200, 'accepted 1\nrejected 0\n');
    });
    const client = new ApiClient('', fetchFn);
    const outcome = await client.postSeeds('s', [{ x: 1, y: 2, z: 3, label: 1 }]);
    expect(outcome).toEqual({ accepted: 1, rejected: 0 });
  });
});
