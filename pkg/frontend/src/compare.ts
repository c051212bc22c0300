/** Side-by-side scenario diffs rendered from the compare endpoint. */

import { ApiError } from "./api.js";
import type { ComparePayload } from "./types.js";

export type BadgeTone = "zero" | "better" | "worse" | "unknown";

export interface Badge {
  metric: string;
  delta: number | null;
  text: string;
  tone: BadgeTone;
}

const METRICS: { key: keyof ComparePayload["delta"]; metric: string }[] = [
  { key: "d_after", metric: "segregation (D)" },
  { key: "switch_total", metric: "students switching" },
  { key: "switcher_share", metric: "switcher share" },
  { key: "mean_travel_after", metric: "mean travel (min)" },
];

/** Lower is better for every compared metric, so positive deltas are the
 * regressions to highlight. */
export function compareBadges(payload: ComparePayload): Badge[] {
  return METRICS.map(({ key, metric }) => {
    const delta = payload.delta[key];
    if (delta === null) {
      return { metric, delta, text: "n/a", tone: "unknown" as BadgeTone };
    }
    const tone: BadgeTone =
      Math.abs(delta) <= 1e-12 ? "zero" : delta < 0 ? "better" : "worse";
    const sign = delta > 0 ? "+" : "";
    return { metric, delta, text: `${sign}${delta.toFixed(3)}`, tone };
  });
}

export function regressions(badges: Badge[]): Badge[] {
  return badges.filter((b) => b.tone === "worse");
}

/** Turn a failed compare into a user-facing message instead of a crash. */
export function compareFailureMessage(error: unknown): string {
  if (error instanceof ApiError) {
    if (error.status === 409) return `cannot compare yet: ${error.detail}`;
    return error.detail;
  }
  return error instanceof Error ? error.message : String(error);
}
