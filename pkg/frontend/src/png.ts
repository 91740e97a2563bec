/**
 * Minimal decoder for the server's slice images: 8-bit grayscale,
 * non-interlaced PNG. Used by scripted tests (and any headless tooling)
 * to measure rendered intensities without a browser canvas.
 */

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array; // row-major
}

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

function u32(bytes: Uint8Array, offset: number): number {
  return (
    ((bytes[offset] << 24) >>> 0) +
    (bytes[offset + 1] << 16) +
    (bytes[offset + 2] << 8) +
    bytes[offset + 3]
  );
}

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  if (typeof process !== 'undefined' && process.versions?.node) {
    const zlib = await import('node:zlib');
    return new Uint8Array(zlib.inflateSync(data));
  }
  const stream = new Blob([data as BlobPart]).stream()
    .pipeThrough(new DecompressionStream('deflate'));
  return new Uint8Array(await new Response(stream).arrayBuffer());
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

export async function decodeGrayPng(bytes: Uint8Array): Promise<GrayImage> {
  for (let i = 0; i < 8; i += 1) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error('not a PNG file');
  }
  let offset = 8;
  let width = 0;
  let height = 0;
  const idat: Uint8Array[] = [];
  while (offset < bytes.length) {
    const length = u32(bytes, offset);
    const type = String.fromCharCode(...bytes.slice(offset + 4, offset + 8));
    const data = bytes.slice(offset + 8, offset + 8 + length);
    if (type === 'IHDR') {
      width = u32(data, 0);
      height = u32(data, 4);
      const bitDepth = data[8];
      const colorType = data[9];
      const interlace = data[12];
      if (bitDepth !== 8 || colorType !== 0 || interlace !== 0) {
        throw new Error('only 8-bit non-interlaced grayscale PNGs are supported');
      }
    } else if (type === 'IDAT') {
      idat.push(data);
    } else if (type === 'IEND') {
      break;
    }
    offset += 12 + length;
  }
  const compressed = new Uint8Array(idat.reduce((n, c) => n + c.length, 0));
  let pos = 0;
  for (const chunk of idat) {
    compressed.set(chunk, pos);
    pos += chunk.length;
  }
  const raw = await inflate(compressed);
  const stride = width + 1; // one filter byte per scanline, 1 byte per pixel
  if (raw.length < stride * height) throw new Error('truncated PNG data');
  const pixels = new Uint8Array(width * height);
  let prev = new Uint8Array(width);
  for (let row = 0; row < height; row += 1) {
    const filter = raw[row * stride];
    const line = raw.slice(row * stride + 1, row * stride + 1 + width);
    const out = new Uint8Array(width);
    for (let x = 0; x < width; x += 1) {
      const left = x > 0 ? out[x - 1] : 0;
      const up = prev[x];
      const upLeft = x > 0 ? prev[x - 1] : 0;
      let value: number;
      switch (filter) {
        case 0: value = line[x]; break;
        case 1: value = line[x] + left; break;
        case 2: value = line[x] + up; break;
        case 3: value = line[x] + Math.floor((left + up) / 2); break;
        case 4: value = line[x] + paeth(left, up, upLeft); break;
        default: throw new Error(`unsupported PNG filter ${filter}`);
      }
      out[x] = value & 0xff;
    }
    pixels.set(out, row * width);
    prev = out;
  }
  return { width, height, pixels };
}

export function meanIntensity(image: GrayImage): number {
  let total = 0;
  for (const v of image.pixels) total += v;
  return total / image.pixels.length;
}
