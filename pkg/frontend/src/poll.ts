/**
 * The iterate-and-poll loop: submit the pending seed batch, trigger one
 * iteration, and poll status until the session is idle again. Network
 * drops during polling are retried with exponential backoff; the iterate
 * request itself is never re-sent, so a flaky connection cannot start a
 * duplicate job.
 */

import { ApiClient, ApiError, Seed, SessionStatus } from './api.js';

export interface PollOptions {
  intervalMs: number;
  backoffFactor: number;
  maxIntervalMs: number;
  maxNetworkRetries: number;
  timeoutMs: number;
  sleep?: (ms: number) => Promise<void>;
}

export const DEFAULT_POLL: PollOptions = {
  intervalMs: 300,
  backoffFactor: 2,
  maxIntervalMs: 5000,
  maxNetworkRetries: 6,
  timeoutMs: 10 * 60 * 1000,
};

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export interface IterationResult {
  status: SessionStatus;
  submitted: number;
  rejected: number;
}

export async function iterateAndPoll(
  client: ApiClient,
  sessionId: string,
  pending: Seed[],
  options: Partial<PollOptions> = {},
  onProgress?: (fraction: number) => void,
): Promise<IterationResult> {
  const opts = { ...DEFAULT_POLL, ...options };
  const sleep = opts.sleep ?? defaultSleep;

  let submitted = 0;
  let rejected = 0;
  if (pending.length) {
    const outcome = await client.postSeeds(sessionId, pending);
    submitted = outcome.accepted;
    rejected = outcome.rejected;
  }
  await client.iterate(sessionId); // busy/single_class surface as ApiError

  let interval = opts.intervalMs;
  let networkFailures = 0;
  const deadline = Date.now() + opts.timeoutMs;
  for (;;) {
    if (Date.now() > deadline) {
      throw new ApiError(0, 'timeout', 'iteration did not finish in time');
    }
    await sleep(interval);
    let status: SessionStatus;
    try {
      status = await client.status(sessionId);
      networkFailures = 0;
    } catch (error) {
      if (error instanceof ApiError && error.status > 0) throw error;
      networkFailures += 1; // transport-level failure: back off and retry
      if (networkFailures > opts.maxNetworkRetries) throw error;
      interval = Math.min(interval * opts.backoffFactor, opts.maxIntervalMs);
      continue;
    }
    if (onProgress) onProgress(status.progress);
    if (status.state === 'idle') {
      if (status.error) {
        throw new ApiError(0, 'iteration_failed', status.error);
      }
      return { status, submitted, rejected };
    }
  }
}
