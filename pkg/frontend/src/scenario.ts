/** Editable scenario state and its round trip to a solve request.
 *
 * The form never submits silently-broken input: validate() lists every
 * problem inline, and buildRequest() refuses to produce a request while
 * any remain.
 */

import type { WhatIfRequest } from "./types.js";

/** Unordered school pair, normalized so ["B","A"] and ["A","B"] collide. */
export type Pair = [string, string];

export function pairKey(pair: Pair): string {
  const [a, b] = pair;
  return a <= b ? `${a}${b}` : `${b}${a}`;
}

export function keyToPair(key: string): Pair {
  const parts = key.split("");
  return [parts[0], parts[1]];
}

export type PairMark = "none" | "pinned" | "forbidden";

export interface ScenarioConfig {
  instanceId: string;
  pMin: number;
  allowTriples: boolean;
  timeLimit: number;
  seed: number;
  /** pairKey -> mark; "none" entries are dropped eagerly. */
  pairMarks: Map<string, PairMark>;
  objective: string;
  optOutRatios: Record<string, number>;
  interdistrict: boolean;
}

export function freshConfig(instanceId = ""): ScenarioConfig {
  return {
    instanceId,
    pMin: 0.8,
    allowTriples: true,
    timeLimit: 120,
    seed: 0,
    pairMarks: new Map(),
    objective: "",
    optOutRatios: {},
    interdistrict: false,
  };
}

export function markOf(config: ScenarioConfig, pair: Pair): PairMark {
  return config.pairMarks.get(pairKey(pair)) ?? "none";
}

/** One click walks a pair through none -> pinned -> forbidden -> none. */
export function cyclePair(config: ScenarioConfig, pair: Pair): PairMark {
  const key = pairKey(pair);
  const current = config.pairMarks.get(key) ?? "none";
  const next: PairMark =
    current === "none" ? "pinned" : current === "pinned" ? "forbidden" : "none";
  if (next === "none") {
    config.pairMarks.delete(key);
  } else {
    config.pairMarks.set(key, next);
  }
  return next;
}

export function setMark(config: ScenarioConfig, pair: Pair, mark: PairMark): void {
  const key = pairKey(pair);
  if (mark === "none") config.pairMarks.delete(key);
  else config.pairMarks.set(key, mark);
}

export function clearMarks(config: ScenarioConfig): void {
  config.pairMarks.clear();
}

function pairsWithMark(config: ScenarioConfig, mark: PairMark): Pair[] {
  const out: Pair[] = [];
  for (const [key, value] of config.pairMarks) {
    if (value === mark) out.push(keyToPair(key));
  }
  out.sort((x, y) => pairKey(x).localeCompare(pairKey(y)));
  return out;
}

export const pinnedPairs = (c: ScenarioConfig) => pairsWithMark(c, "pinned");
export const forbiddenPairs = (c: ScenarioConfig) => pairsWithMark(c, "forbidden");

/** Inline validation messages; empty means the config is submittable. */
export function validate(config: ScenarioConfig): string[] {
  const problems: string[] = [];
  if (!config.instanceId) {
    problems.push("pick a district first");
  }
  if (!Number.isFinite(config.pMin) || config.pMin < 0 || config.pMin > 1) {
    problems.push("enrollment floor must be between 0 and 1");
  }
  if (!Number.isFinite(config.timeLimit) || config.timeLimit <= 0) {
    problems.push("time limit must be a positive number of seconds");
  }
  if (!Number.isInteger(config.seed) || config.seed < 0) {
    problems.push("seed must be a non-negative integer");
  }
  for (const [group, ratio] of Object.entries(config.optOutRatios)) {
    if (!Number.isFinite(ratio) || ratio < 0) {
      problems.push(`opt-out ratio for ${group} must be a finite number >= 0`);
    }
  }
  for (const [key, mark] of config.pairMarks) {
    if (mark !== "none") continue;
    problems.push(`stale mark on pair ${keyToPair(key).join(", ")}`);
  }
  return problems;
}

/** Build the request body, or throw listing what is still wrong. */
export function buildRequest(config: ScenarioConfig): WhatIfRequest {
  const problems = validate(config);
  if (problems.length > 0) {
    throw new Error(`config is not submittable: ${problems.join("; ")}`);
  }
  const optOut = Object.keys(config.optOutRatios).length
    ? { ...config.optOutRatios }
    : null;
  return {
    instance_id: config.instanceId,
    p_min: config.pMin,
    allow_triples: config.allowTriples,
    time_limit: config.timeLimit,
    seed: config.seed,
    forbid: forbiddenPairs(config),
    require: pinnedPairs(config),
    objective: config.objective.trim() === "" ? null : config.objective.trim(),
    opt_out_ratios: optOut,
    interdistrict: config.interdistrict,
  };
}
