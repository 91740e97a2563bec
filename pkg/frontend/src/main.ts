/**
 * Application bootstrap: session creation form, slice navigation, seed
 * placement, iteration control with progress polling, threshold preview,
 * and export links. One in-flight mutating request at a time; the iterate
 * button stays disabled until the running job finishes.
 */

import { ApiClient, ApiError } from './api.js';
import { iterateAndPoll } from './poll.js';
import {
  Axis, Layer, ViewState, commitPending, hasBothClasses, initialViewState,
  placeSeed, toggleLabel, undoPendingSeed,
} from './state.js';
import { SliceViewer } from './viewer.js';

const client = new ApiClient('');

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

let state: ViewState | null = null;
let viewer: SliceViewer | null = null;

function notice(text: string, isError = false): void {
  const box = el<HTMLDivElement>('notice');
  box.textContent = text;
  box.className = isError ? 'notice error' : 'notice';
}

async function refresh(): Promise<void> {
  if (!state || !viewer) return;
  try {
    await viewer.render(state);
  } catch (error) {
    notice(String(error), true);
  }
  el<HTMLSpanElement>('slice-label').textContent =
    `${state.axis} = ${state.index} / ${state.dims['xyz'.indexOf(state.axis)] - 1}`;
  el<HTMLSpanElement>('pending-count').textContent =
    `${state.pending.length} pending seeds (next: ${state.nextLabel > 0 ? '+1' : '-1'})`;
  const canIterate = hasBothClasses(state) && state.polling === 'idle';
  el<HTMLButtonElement>('iterate').disabled = !canIterate;
  el<HTMLButtonElement>('iterate').title = canIterate
    ? 'train + classify'
    : 'need at least one seed of each class and an idle session';
}

async function createSession(): Promise<void> {
  const volume = el<HTMLInputElement>('volume-path').value.trim();
  if (!volume) {
    notice('enter a volume path', true);
    return;
  }
  try {
    const id = await client.createSession({
      volume,
      features: el<HTMLInputElement>('features').value.split(',').map((s) => s.trim()),
      envSize: Number(el<HTMLInputElement>('env-size').value),
      delta: Number(el<HTMLInputElement>('delta').value),
      levels: Number(el<HTMLInputElement>('levels').value),
    });
    const status = await client.status(id);
    state = initialViewState(id, status.dims);
    viewer = new SliceViewer(el<HTMLCanvasElement>('slice'), client);
    notice(`session ${id} on ${status.dims.join('x')}`);
    el<HTMLDivElement>('annotator').style.display = 'block';
    await refresh();
  } catch (error) {
    notice(error instanceof ApiError ? `${error.code}: ${error.message}` : String(error), true);
  }
}

async function runIteration(): Promise<void> {
  if (!state || !viewer) return;
  if (!hasBothClasses(state)) {
    notice('label at least one positive and one negative seed first', true);
    return;
  }
  const batch = state.pending;
  state = { ...state, polling: 'busy' };
  await refresh();
  const bar = el<HTMLProgressElement>('progress');
  bar.value = 0;
  try {
    const result = await iterateAndPoll(client, state.sessionId, batch, {},
                                        (f) => { bar.value = f; });
    viewer.markSubmitted(batch);
    state = commitPending({ ...state, polling: 'idle' });
    state = { ...state, layer: 'confidence' };
    (el<HTMLSelectElement>('layer')).value = 'confidence';
    bar.value = 1;
    notice(`iteration ${result.status.iteration} done `
      + `(${result.submitted} seeds accepted, ${result.rejected} rejected)`);
  } catch (error) {
    state = { ...state, polling: 'idle' };
    notice(error instanceof ApiError ? `${error.code}: ${error.message}` : String(error), true);
  }
  await refresh();
}

function wire(): void {
  el<HTMLButtonElement>('create').addEventListener('click', () => void createSession());
  el<HTMLButtonElement>('iterate').addEventListener('click', () => void runIteration());
  el<HTMLButtonElement>('undo').addEventListener('click', () => {
    if (!state) return;
    state = undoPendingSeed(state);
    void refresh();
  });
  el<HTMLButtonElement>('toggle-label').addEventListener('click', () => {
    if (!state) return;
    state = toggleLabel(state);
    void refresh();
  });
  el<HTMLSelectElement>('axis').addEventListener('change', (event) => {
    if (!state) return;
    const axis = (event.target as HTMLSelectElement).value as Axis;
    const max = state.dims['xyz'.indexOf(axis)];
    state = { ...state, axis, index: Math.floor(max / 2) };
    void refresh();
  });
  el<HTMLSelectElement>('layer').addEventListener('change', (event) => {
    if (!state) return;
    state = { ...state, layer: (event.target as HTMLSelectElement).value as Layer };
    void refresh();
  });
  el<HTMLInputElement>('blend').addEventListener('input', (event) => {
    if (!state) return;
    state = { ...state, blend: Number((event.target as HTMLInputElement).value) };
    void refresh();
  });
  el<HTMLInputElement>('threshold').addEventListener('input', (event) => {
    if (!state) return;
    const value = Number((event.target as HTMLInputElement).value);
    state = { ...state, thresholdPreview: value > 0 ? value : null };
    void refresh();
  });
  el<HTMLInputElement>('slice-index').addEventListener('input', (event) => {
    if (!state) return;
    const max = state.dims['xyz'.indexOf(state.axis)] - 1;
    const index = Math.max(0, Math.min(max,
      Number((event.target as HTMLInputElement).value)));
    state = { ...state, index };
    void refresh();
  });
  el<HTMLCanvasElement>('slice').addEventListener('click', (event) => {
    if (!state || state.polling !== 'idle') return;
    const canvas = el<HTMLCanvasElement>('slice');
    const rect = canvas.getBoundingClientRect();
    const px = (event.clientX - rect.left) * (canvas.width / rect.width);
    const py = (event.clientY - rect.top) * (canvas.height / rect.height);
    const before = state.pending.length;
    state = placeSeed(state, px, py, canvas.width, canvas.height);
    if (state.pending.length === before) notice('click ignored (outside volume)');
    void refresh();
  });
  for (const what of ['confidence', 'uncertainty', 'model', 'seeds'] as const) {
    el<HTMLButtonElement>(`export-${what}`).addEventListener('click', () => {
      if (!state) return;
      window.open(`/sessions/${state.sessionId}/export?what=${what}`, '_blank');
    });
  }
}

document.addEventListener('DOMContentLoaded', wire);
