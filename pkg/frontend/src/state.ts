/**
 * View state for the slice annotator and the pure geometry/pixel helpers
 * the canvas layer is built on. The UI never mutates voxel data: every
 * displayed pixel comes from a server slice image; client-side work is
 * restricted to compositing and the threshold preview.
 */

import type { Seed } from './api.js';

export type Axis = 'x' | 'y' | 'z';
export type Layer = 'gray' | 'confidence' | 'uncertainty';

export interface ViewState {
  sessionId: string;
  dims: [number, number, number];
  axis: Axis;
  index: number;
  layer: Layer;
  blend: number; // overlay opacity in [0, 1]
  window: { min: number; max: number };
  pending: Seed[];
  accumulatedPositive: number; // accepted by the server in earlier batches
  accumulatedNegative: number;
  polling: 'idle' | 'busy';
  nextLabel: 1 | -1;
  thresholdPreview: number | null; // percent, confidence layer only
}

export function initialViewState(sessionId: string, dims: [number, number, number]): ViewState {
  return {
    sessionId,
    dims,
    axis: 'z',
    index: Math.floor(dims[2] / 2),
    layer: 'gray',
    blend: 0.5,
    window: { min: 0, max: 255 },
    pending: [],
    accumulatedPositive: 0,
    accumulatedNegative: 0,
    polling: 'idle',
    nextLabel: 1,
    thresholdPreview: null,
  };
}

/** Rows/cols of a slice image: rows = the first remaining axis, cols = the
 * second, matching the server's array slicing. */
export function sliceShape(dims: [number, number, number], axis: Axis): { rows: number; cols: number } {
  if (axis === 'x') return { rows: dims[1], cols: dims[2] };
  if (axis === 'y') return { rows: dims[0], cols: dims[2] };
  return { rows: dims[0], cols: dims[1] };
}

/** Image pixel (row, col) -> voxel position on the current slice. */
export function pixelToVoxel(
  axis: Axis,
  index: number,
  row: number,
  col: number,
): [number, number, number] {
  if (axis === 'x') return [index, row, col];
  if (axis === 'y') return [row, index, col];
  return [row, col, index];
}

/**
 * Canvas click -> voxel position (floor mapping), or null when the click
 * falls outside the volume.
 */
export function canvasToVoxel(
  state: ViewState,
  px: number,
  py: number,
  canvasWidth: number,
  canvasHeight: number,
): [number, number, number] | null {
  if (px < 0 || py < 0 || px >= canvasWidth || py >= canvasHeight) return null;
  const { rows, cols } = sliceShape(state.dims, state.axis);
  const row = Math.floor((py / canvasHeight) * rows);
  const col = Math.floor((px / canvasWidth) * cols);
  if (row < 0 || row >= rows || col < 0 || col >= cols) return null;
  const voxel = pixelToVoxel(state.axis, state.index, row, col);
  for (let i = 0; i < 3; i += 1) {
    if (voxel[i] < 0 || voxel[i] >= state.dims[i]) return null;
  }
  return voxel;
}

/** Voxel position -> canvas center point of its pixel (for seed glyphs). */
export function voxelToCanvas(
  state: ViewState,
  voxel: [number, number, number],
  canvasWidth: number,
  canvasHeight: number,
): { x: number; y: number } | null {
  const { rows, cols } = sliceShape(state.dims, state.axis);
  let row: number;
  let col: number;
  let onSlice: boolean;
  if (state.axis === 'x') {
    onSlice = voxel[0] === state.index;
    row = voxel[1];
    col = voxel[2];
  } else if (state.axis === 'y') {
    onSlice = voxel[1] === state.index;
    row = voxel[0];
    col = voxel[2];
  } else {
    onSlice = voxel[2] === state.index;
    row = voxel[0];
    col = voxel[1];
  }
  if (!onSlice) return null;
  return {
    x: ((col + 0.5) / cols) * canvasWidth,
    y: ((row + 0.5) / rows) * canvasHeight,
  };
}

export function placeSeed(
  state: ViewState,
  px: number,
  py: number,
  canvasWidth: number,
  canvasHeight: number,
): ViewState {
  const voxel = canvasToVoxel(state, px, py, canvasWidth, canvasHeight);
  if (voxel === null) return state; // out-of-volume clicks are ignored
  const seed: Seed = { x: voxel[0], y: voxel[1], z: voxel[2], label: state.nextLabel };
  const duplicate = state.pending.find(
    (s) => s.x === seed.x && s.y === seed.y && s.z === seed.z,
  );
  if (duplicate) return state;
  return { ...state, pending: [...state.pending, seed] };
}

export function undoPendingSeed(state: ViewState): ViewState {
  if (!state.pending.length) return state;
  return { ...state, pending: state.pending.slice(0, -1) };
}

export function toggleLabel(state: ViewState): ViewState {
  return { ...state, nextLabel: state.nextLabel > 0 ? -1 : 1 };
}

/** Alpha blend of a grayscale base pixel with an overlay pixel. */
export function blendPixel(base: number, overlay: number, blend: number): number {
  return Math.round(base * (1 - blend) + overlay * blend);
}

/**
 * Threshold preview: binarize a confidence-slice pixel rendered with the
 * window [0, 100]. Pixel p corresponds to confidence p / 255 * 100 percent,
 * so the cut sits at threshold * 255 / 100.
 */
export function binarizeConfidencePixel(pixel: number, thresholdPercent: number): number {
  return pixel >= (thresholdPercent * 255) / 100 ? 255 : 0;
}

/** Client-side mirror of the server's two-class rule for iterate. */
export function hasBothClasses(state: ViewState): boolean {
  const pos = state.accumulatedPositive + state.pending.filter((s) => s.label > 0).length;
  const neg = state.accumulatedNegative + state.pending.filter((s) => s.label < 0).length;
  return pos > 0 && neg > 0;
}

/** Fold a successful submission into the accumulated per-class counters. */
export function commitPending(state: ViewState): ViewState {
  return {
    ...state,
    accumulatedPositive:
      state.accumulatedPositive + state.pending.filter((s) => s.label > 0).length,
    accumulatedNegative:
      state.accumulatedNegative + state.pending.filter((s) => s.label < 0).length,
    pending: [],
  };
}
