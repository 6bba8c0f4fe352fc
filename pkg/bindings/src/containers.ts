/**
 * Parsers for the patchkit binary containers.
 *
 * Layouts are fixed little-endian with 8-byte-aligned sections; see the
 * primary component's voxels/codec/patches module docs for the byte maps.
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";

import { f64View, i32View, i8View, padded, u8View, u32View } from "./buffers.js";

const ENCODED_MAGIC = "PKVX";
const TARGET_MAGIC = "PKTG";
const RECORD_MAGIC = "PKPR";

export class ContainerError extends Error {}

export interface EncodedSample {
  gridDims: [number, number, number];
  numChannels: number;
  /** (V, 3) voxel coordinates, first-seen order, row-major. */
  coords: Int32Array;
  /** Points stored per voxel. */
  counts: Uint32Array;
  /** Prefix sums of counts: features of voxel i span offsets[i]..offsets[i+1]. */
  offsets: Uint32Array;
  /** (P, numChannels) normalized features, voxel-major. */
  features: Float64Array;
  /** Per-channel normalization statistics (pre-normalization). */
  mean: Float64Array;
  std: Float64Array;
}

export function parseEncodedSample(buffer: Buffer): EncodedSample {
  if (buffer.length < 36 || buffer.toString("latin1", 0, 4) !== ENCODED_MAGIC) {
    throw new ContainerError("not an encoded-sample container");
  }
  const version = buffer.readUInt32LE(4);
  if (version !== 1) throw new ContainerError(`unsupported container version ${version}`);
  const numVoxels = buffer.readUInt32LE(8);
  const numChannels = buffer.readUInt32LE(12);
  const totalPoints = Number(buffer.readBigUInt64LE(16));
  const gridDims: [number, number, number] = [
    buffer.readUInt32LE(24),
    buffer.readUInt32LE(28),
    buffer.readUInt32LE(32),
  ];
  let cursor = 36;
  const coords = i32View(buffer, cursor, numVoxels * 3);
  cursor += numVoxels * 12;
  const counts = u32View(buffer, cursor, numVoxels);
  cursor += numVoxels * 4;
  const features = f64View(buffer, cursor, totalPoints * numChannels);
  cursor += totalPoints * numChannels * 8;
  const mean = f64View(buffer, cursor, numChannels);
  cursor += numChannels * 8;
  const std = f64View(buffer, cursor, numChannels);

  const offsets = new Uint32Array(numVoxels + 1);
  for (let i = 0; i < numVoxels; i++) offsets[i + 1] = offsets[i] + counts[i];
  return { gridDims, numChannels, coords, counts, offsets, features, mean, std };
}

export interface TargetSet {
  numAnchors: number;
  numGroundTruth: number;
  /** (K, 9) residual regression targets. */
  residuals: Float64Array;
  /** Orientation direction bits. */
  direction: Uint8Array;
  /** (K, 8) corner-difference auxiliary targets. */
  corners: Float64Array;
  /** 1 positive / 0 ignored / -1 negative detection labels. */
  detLabels: Int8Array;
  regPositive: Uint8Array;
  /** Matched ground-truth row per anchor, -1 when unmatched. */
  matchedGt: Int32Array;
}

export function parseTargetSet(buffer: Buffer): TargetSet {
  if (buffer.length < 16 || buffer.toString("latin1", 0, 4) !== TARGET_MAGIC) {
    throw new ContainerError("not a target container");
  }
  const version = buffer.readUInt32LE(4);
  if (version !== 1) throw new ContainerError(`unsupported target version ${version}`);
  const numAnchors = buffer.readUInt32LE(8);
  const numGroundTruth = buffer.readUInt32LE(12);
  let cursor = 16;
  const residuals = f64View(buffer, cursor, numAnchors * 9);
  cursor += numAnchors * 72;
  const direction = u8View(buffer, cursor, numAnchors);
  cursor += padded(numAnchors);
  const corners = f64View(buffer, cursor, numAnchors * 8);
  cursor += numAnchors * 64;
  const detLabels = i8View(buffer, cursor, numAnchors);
  cursor += padded(numAnchors);
  const regPositive = u8View(buffer, cursor, numAnchors);
  cursor += padded(numAnchors);
  const matchedGt = i32View(buffer, cursor, numAnchors);
  return { numAnchors, numGroundTruth, residuals, direction, corners, detLabels, regPositive, matchedGt };
}

export interface AugmentationLog {
  seed: bigint;
  globalMirror: boolean;
  globalScale: number;
  objectMirror: boolean;
  objectScale: number;
  globalRotation: number;
  objectRotation: number;
  verticalShift: number;
}

export interface PatchRecord {
  frameId: string;
  objectIndex: number;
  /** (N, 4) x, y, z, reflectance. */
  points: Float64Array;
  numPoints: number;
  /** 7-value box (cx, cy, cz, l, w, h, yaw), or null for inference patches. */
  box: Float64Array | null;
  cropCenter: [number, number];
  noise: { radius: number; angle: number };
  augmentation: AugmentationLog;
  /** Depth-axis alignment rotation recorded at extraction time. */
  rotation: number;
}

const RECORD_HEADER_BYTES = 32;
const RECORD_FLOATS = 19;

export function parsePatchRecord(buffer: Buffer): PatchRecord {
  if (buffer.length < RECORD_HEADER_BYTES || buffer.toString("latin1", 0, 4) !== RECORD_MAGIC) {
    throw new ContainerError("not a patch record");
  }
  const version = buffer.readUInt16LE(4);
  if (version !== 1) throw new ContainerError(`unsupported patch record version ${version}`);
  const flags = buffer.readUInt16LE(6);
  const numPoints = buffer.readUInt32LE(8);
  const objectIndex = buffer.readUInt32LE(12);
  const frameId = buffer.toString("latin1", 16, 24).replace(/\0+$/, "");
  const seed = buffer.readBigUInt64LE(24);
  const values = f64View(buffer, RECORD_HEADER_BYTES, RECORD_FLOATS);
  const points = f64View(buffer, RECORD_HEADER_BYTES + RECORD_FLOATS * 8, numPoints * 4);
  return {
    frameId,
    objectIndex,
    points,
    numPoints,
    box: flags & 1 ? values.slice(0, 7) : null,
    cropCenter: [values[7], values[8]],
    noise: { radius: values[9], angle: values[10] },
    augmentation: {
      seed,
      globalMirror: values[11] !== 0,
      globalScale: values[12],
      objectMirror: values[13] !== 0,
      objectScale: values[14],
      globalRotation: values[15],
      objectRotation: values[16],
      verticalShift: values[17],
    },
    rotation: values[18],
  };
}

export interface PatchIndexRecord {
  offset: number;
  size: number;
  frame_id: string;
  object_index: number;
  difficulty: string;
}

export interface PatchIndex {
  version: number;
  seed: number;
  count: number;
  data_file: string;
  data_sha256: string;
  records: PatchIndexRecord[];
}

export function readPatchIndex(databaseDir: string): PatchIndex {
  return JSON.parse(readFileSync(join(databaseDir, "index.json"), "utf-8")) as PatchIndex;
}
