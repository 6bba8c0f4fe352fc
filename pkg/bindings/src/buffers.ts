/**
 * Typed-array views over container bytes.
 *
 * Views are zero-copy whenever the section's byte offset is aligned for the
 * element type; otherwise the bytes are copied into a fresh aligned buffer.
 * Every multi-byte section in the patchkit containers is little-endian,
 * which matches every platform Node currently ships on.
 */

type TypedArrayCtor<T> = {
  new (buffer: ArrayBufferLike, byteOffset: number, length: number): T;
  new (length: number): T;
  BYTES_PER_ELEMENT: number;
};

function view<T extends { byteLength: number }>(
  ctor: TypedArrayCtor<T>,
  buffer: Buffer,
  byteOffset: number,
  length: number,
): T {
  const absolute = buffer.byteOffset + byteOffset;
  if (absolute % ctor.BYTES_PER_ELEMENT === 0) {
    return new ctor(buffer.buffer, absolute, length);
  }
  // Misaligned view: copy into an owned, aligned buffer.
  const bytes = buffer.subarray(byteOffset, byteOffset + length * ctor.BYTES_PER_ELEMENT);
  const copy = new ctor(length);
  new Uint8Array((copy as unknown as Uint8Array).buffer).set(bytes);
  return copy;
}

export const f64View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Float64Array, buffer, byteOffset, length);

export const f32View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Float32Array, buffer, byteOffset, length);

export const i32View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Int32Array, buffer, byteOffset, length);

export const u32View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Uint32Array, buffer, byteOffset, length);

export const i8View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Int8Array, buffer, byteOffset, length);

export const u8View = (buffer: Buffer, byteOffset: number, length: number) =>
  view(Uint8Array, buffer, byteOffset, length);

/** Round a byte count up to the container's 8-byte section alignment. */
export const padded = (bytes: number) => bytes + ((8 - (bytes % 8)) % 8);

/** Raw little-endian bytes of a float array (for writing input files). */
export function f64Bytes(values: Float64Array): Buffer {
  return Buffer.from(values.buffer, values.byteOffset, values.byteLength);
}

export function f32Bytes(values: Float32Array): Buffer {
  return Buffer.from(values.buffer, values.byteOffset, values.byteLength);
}
