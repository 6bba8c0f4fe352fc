/**
 * Array-in/array-out access to the patchkit encoding pipeline.
 *
 * Each call marshals plain typed arrays across the process boundary,
 * delegates the computation to the primary component, and parses the
 * binary result containers back into typed arrays.  Inputs are never
 * mutated; outputs are views over the container bytes wherever alignment
 * permits.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { createHash } from "node:crypto";
import { join } from "node:path";

import { f32Bytes, f64Bytes } from "./buffers.js";
import {
  ContainerError,
  EncodedSample,
  PatchIndex,
  PatchRecord,
  TargetSet,
  parseEncodedSample,
  parsePatchRecord,
  parseTargetSet,
  readPatchIndex,
} from "./containers.js";
import { PipelineError, pipelineVersion, runPipeline, withScratchDir } from "./runner.js";

export const VERSION = "0.1.0";

export type GridPreset = "lrn" | "rpn";

export {
  ContainerError,
  EncodedSample,
  PatchIndex,
  PatchRecord,
  PipelineError,
  TargetSet,
  pipelineVersion,
  readPatchIndex,
};

function expectColumns(name: string, length: number, columns: number): number {
  if (length % columns !== 0) {
    throw new ContainerError(`${name} length ${length} is not a multiple of ${columns}`);
  }
  return length / columns;
}

/**
 * Group points into voxels and encode network-input features.
 *
 * `points` is a flat (N, 4) array of x, y, z, reflectance; float32 input
 * reproduces the primary component bit for bit.  `center` re-centers the
 * "lrn" patch grid on a crop center.
 */
export function groupAndEncode(
  points: Float32Array | Float64Array,
  preset: GridPreset = "lrn",
  center?: [number, number],
): EncodedSample {
  expectColumns("points", points.length, 4);
  return withScratchDir((dir) => {
    const input = join(dir, "points.raw");
    const output = join(dir, "sample.bin");
    const isF32 = points instanceof Float32Array;
    writeFileSync(input, isF32 ? f32Bytes(points) : f64Bytes(points as Float64Array));
    const args = [
      "encode",
      "--points", input,
      "--dtype", isF32 ? "f32" : "f64",
      "--preset", preset,
      "--out", output,
    ];
    if (center) args.push("--center", String(center[0]), String(center[1]));
    runPipeline(args);
    return parseEncodedSample(readFileSync(output));
  });
}

/**
 * Match anchors against ground-truth boxes and encode regression targets.
 *
 * Both inputs are flat little-endian float64 rows of
 * (cx, cy, cz, l, w, h, yaw): `gtBoxes` is (M, 7) and `anchors` (K, 7).
 */
export function encodeTargets(gtBoxes: Float64Array, anchors: Float64Array): TargetSet {
  expectColumns("gtBoxes", gtBoxes.length, 7);
  expectColumns("anchors", anchors.length, 7);
  return withScratchDir((dir) => {
    const gtFile = join(dir, "gt.f64");
    const anchorFile = join(dir, "anchors.f64");
    const output = join(dir, "targets.bin");
    writeFileSync(gtFile, f64Bytes(gtBoxes));
    writeFileSync(anchorFile, f64Bytes(anchors));
    runPipeline(["encode-targets", "--gt", gtFile, "--anchors", anchorFile, "--out", output]);
    return parseTargetSet(readFileSync(output));
  });
}

/**
 * Load one record of a patch database built by `patchkit build-patch-db`.
 *
 * The database bytes are read directly (the on-disk container is part of
 * the primary component's interface); the index hash is verified first.
 */
export function samplePatch(databaseDir: string, index: number): PatchRecord {
  const indexData = readPatchIndex(databaseDir);
  if (index < 0 || index >= indexData.count) {
    throw new ContainerError(`record index ${index} out of range [0, ${indexData.count})`);
  }
  const data = readFileSync(join(databaseDir, indexData.data_file));
  const digest = createHash("sha256").update(data).digest("hex");
  if (digest !== indexData.data_sha256) {
    throw new ContainerError(`${databaseDir}: data file hash mismatch`);
  }
  const record = indexData.records[index];
  return parsePatchRecord(data.subarray(record.offset, record.offset + record.size));
}

/** SHA-256 over every record payload of a database, for content audits. */
export function databaseContentHash(databaseDir: string): string {
  const indexData = readPatchIndex(databaseDir);
  const data = readFileSync(join(databaseDir, indexData.data_file));
  const hash = createHash("sha256");
  for (const record of indexData.records) {
    hash.update(data.subarray(record.offset, record.offset + record.size));
  }
  return hash.digest("hex");
}

/** Grid constants mirrored from the primary presets. */
export const PRESET_GRID_DIMS: Record<GridPreset, [number, number, number]> = {
  lrn: [64, 64, 19],
  rpn: [352, 400, 2],
};

/** Assert the primary component speaks the same interface version. */
export function checkVersion(): string {
  const version = pipelineVersion();
  if (version !== VERSION) {
    throw new PipelineError(`pipeline version ${version} != bindings version ${VERSION}`);
  }
  return version;
}
