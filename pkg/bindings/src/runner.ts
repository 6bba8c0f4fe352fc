/**
 * Process boundary to the primary pipeline.
 *
 * The primary component is reached exclusively through its command-line
 * interface and file formats; no Python state leaks across the boundary.
 * Set PATCHKIT_CMD to override the executable (default: `python3 -m
 * patchkit`, falling back to a `patchkit` on PATH).
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export class PipelineError extends Error {}

function command(): string[] {
  const override = process.env.PATCHKIT_CMD;
  if (override) return override.split(" ");
  return ["python3", "-m", "patchkit"];
}

export function runPipeline(args: string[]): string {
  const [executable, ...prefix] = command();
  const result = spawnSync(executable, [...prefix, ...args], {
    encoding: "utf-8",
    maxBuffer: 256 * 1024 * 1024,
  });
  if (result.error) {
    throw new PipelineError(`failed to launch ${executable}: ${result.error.message}`);
  }
  if (result.status !== 0) {
    throw new PipelineError(
      `pipeline exited with ${result.status}: ${result.stderr.trim() || result.stdout.trim()}`,
    );
  }
  return result.stdout;
}

export function pipelineVersion(): string {
  return runPipeline(["--version"]).trim();
}

/** Run `fn` with a private scratch directory, cleaning up afterwards. */
export function withScratchDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "patchkit-bindings-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}
