import { describe, expect, it, vi } from 'vitest';

import { ApiClient, formatKv } from '../src/api.js';
import { iterateAndPoll } from '../src/poll.js';

type Handler = (url: string, init?: RequestInit) => Promise<Response>;

function kvResponse(status: number, doc: Record<string, string>): Response {
  return new Response(formatKv(doc), { status });
}

function statusDoc(state: string, extra: Record<string, string> = {}) {
  return {
    id: 's', state, progress: state === 'idle' ? '1.0' : '0.5',
    iteration: '1', levels: '1', delta: '1.0', dims: '8 8 8',
    seeds: '4', pending: '0', layers: 'confidence,uncertainty', ...extra,
  };
}

const noSleep = () => Promise.resolve();

describe('iterateAndPoll', () => {
  it('submits seeds once, iterates once, polls to idle', async () => {
    const calls: string[] = [];
    const states = ['training', 'classifying', 'idle'];
    const handler: Handler = async (url, init) => {
      calls.push(`${init?.method ?? 'GET'} ${url}`);
      if (url.endsWith('/seeds')) return kvResponse(200, { accepted: '2', rejected: '0' });
      if (url.endsWith('/iterate')) return kvResponse(202, { accepted: '1' });
      return kvResponse(200, statusDoc(states.shift() ?? 'idle'));
    };
    const client = new ApiClient('', handler);
    const progress: number[] = [];
    const result = await iterateAndPoll(
      client, 's',
      [{ x: 1, y: 1, z: 1, label: 1 }, { x: 2, y: 2, z: 2, label: -1 }],
      { sleep: noSleep },
      (f) => progress.push(f),
    );
    expect(result.submitted).toBe(2);
    expect(result.status.state).toBe('idle');
    expect(calls.filter((c) => c.includes('/iterate'))).toHaveLength(1);
    expect(calls.filter((c) => c.includes('/seeds'))).toHaveLength(1);
    expect(progress[progress.length - 1]).toBe(1);
  });

  it('propagates busy errors without polling', async () => {
    const handler: Handler = async (url) => {
      if (url.endsWith('/iterate')) {
        return kvResponse(409, { code: 'busy', message: 'running' });
      }
      throw new Error('should not be called');
    };
    const client = new ApiClient('', handler);
    await expect(iterateAndPoll(client, 's', [], { sleep: noSleep }))
      .rejects.toMatchObject({ code: 'busy', status: 409 });
  });

  it('retries transport failures with backoff and never re-iterates', async () => {
    let iterateCalls = 0;
    let statusCalls = 0;
    const handler: Handler = async (url) => {
      if (url.endsWith('/iterate')) {
        iterateCalls += 1;
        return kvResponse(202, { accepted: '1' });
      }
      statusCalls += 1;
      if (statusCalls <= 3) throw new TypeError('network down');
      return kvResponse(200, statusDoc('idle'));
    };
    const client = new ApiClient('', handler);
    const sleeps: number[] = [];
    const result = await iterateAndPoll(client, 's', [], {
      sleep: async (ms) => { sleeps.push(ms); },
      intervalMs: 100,
      backoffFactor: 2,
      maxIntervalMs: 1000,
    });
    expect(result.status.state).toBe('idle');
    expect(iterateCalls).toBe(1);
    // backoff grew while the network was down
    expect(sleeps.slice(0, 4)).toEqual([100, 200, 400, 800]);
  });

  it('gives up after too many network failures', async () => {
    const handler: Handler = async (url) => {
      if (url.endsWith('/iterate')) return kvResponse(202, { accepted: '1' });
      throw new TypeError('network down');
    };
    const client = new ApiClient('', handler);
    await expect(iterateAndPoll(client, 's', [], {
      sleep: noSleep, maxNetworkRetries: 2,
    })).rejects.toThrow(/network down/);
  });

  it('surfaces job errors recorded in status', async () => {
    const handler: Handler = async (url) => {
      if (url.endsWith('/iterate')) return kvResponse(202, { accepted: '1' });
      return kvResponse(200, statusDoc('idle', { error: 'training exploded' }));
    };
    const client = new ApiClient('', handler);
    await expect(iterateAndPoll(client, 's', [], { sleep: noSleep }))
      .rejects.toMatchObject({ code: 'iteration_failed' });
  });
});
