/**
 * Canvas compositor for one slice: grayscale base, alpha-blended overlay
 * layer, optional client-side threshold preview of the confidence slice,
 * and seed glyphs (diamonds for pending seeds, circles for submitted ones).
 */

import { ApiClient, Seed } from './api.js';
import { ViewState, binarizeConfidencePixel, sliceShape, voxelToCanvas } from './state.js';

const SCALE = 6; // canvas pixels per voxel

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

export class SliceViewer {
  private submitted: Seed[] = [];

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly client: ApiClient,
  ) {}

  markSubmitted(seeds: Seed[]): void {
    this.submitted = this.submitted.concat(seeds);
  }

  async render(state: ViewState): Promise<void> {
    const { rows, cols } = sliceShape(state.dims, state.axis);
    this.canvas.width = cols * SCALE;
    this.canvas.height = rows * SCALE;
    const ctx = this.canvas.getContext('2d');
    if (!ctx) throw new Error('canvas 2d context unavailable');
    ctx.imageSmoothingEnabled = false;

    const gray = await loadImage(
      this.client.sliceUrl(state.sessionId, state.axis, state.index, 'gray'),
    );
    ctx.drawImage(gray, 0, 0, this.canvas.width, this.canvas.height);

    if (state.layer !== 'gray' && state.blend > 0) {
      const window = state.layer === 'confidence'
        ? { min: 0, max: 100 }
        : { min: 0, max: 1 };
      const overlay = await loadImage(
        this.client.sliceUrl(state.sessionId, state.axis, state.index,
                             state.layer, window),
      );
      if (state.layer === 'confidence' && state.thresholdPreview !== null) {
        ctx.globalAlpha = state.blend;
        ctx.drawImage(this.binarized(overlay, state.thresholdPreview),
                      0, 0, this.canvas.width, this.canvas.height);
      } else {
        ctx.globalAlpha = state.blend;
        ctx.drawImage(overlay, 0, 0, this.canvas.width, this.canvas.height);
      }
      ctx.globalAlpha = 1.0;
    }

    for (const seed of this.submitted) {
      this.glyph(ctx, state, seed, 'circle');
    }
    for (const seed of state.pending) {
      this.glyph(ctx, state, seed, 'diamond');
    }
  }

  /** Client-side what-if binarization of the confidence slice. */
  private binarized(img: HTMLImageElement, thresholdPercent: number): HTMLCanvasElement {
    const off = document.createElement('canvas');
    off.width = img.naturalWidth;
    off.height = img.naturalHeight;
    const ctx = off.getContext('2d');
    if (!ctx) throw new Error('canvas 2d context unavailable');
    ctx.drawImage(img, 0, 0);
    const data = ctx.getImageData(0, 0, off.width, off.height);
    for (let i = 0; i < data.data.length; i += 4) {
      const v = binarizeConfidencePixel(data.data[i], thresholdPercent);
      data.data[i] = data.data[i + 1] = data.data[i + 2] = v;
    }
    ctx.putImageData(data, 0, 0);
    return off;
  }

  private glyph(
    ctx: CanvasRenderingContext2D,
    state: ViewState,
    seed: Seed,
    shape: 'diamond' | 'circle',
  ): void {
    const point = voxelToCanvas(state, [seed.x, seed.y, seed.z],
                                this.canvas.width, this.canvas.height);
    if (!point) return;
    ctx.strokeStyle = seed.label > 0 ? '#27d827' : '#e03131';
    ctx.lineWidth = 2;
    const r = SCALE;
    ctx.beginPath();
    if (shape === 'diamond') {
      ctx.moveTo(point.x, point.y - r);
      ctx.lineTo(point.x + r, point.y);
      ctx.lineTo(point.x, point.y + r);
      ctx.lineTo(point.x - r, point.y);
      ctx.closePath();
    } else {
      ctx.arc(point.x, point.y, r * 0.8, 0, 2 * Math.PI);
    }
    ctx.stroke();
  }
}
