/** Result panels: D gauge, switcher table, travel histogram rows.
 *
 * These map service payloads onto display rows verbatim. The one number
 * formatted here is still the server's number; nothing is re-derived.
 */

import type { ImpactDoc, ResultPayload } from "./types.js";

export function formatD(value: number | null): string {
  return value === null ? "n/a" : value.toFixed(3);
}

export interface GaugeView {
  status: string;
  dBefore: number;
  dAfter: number | null;
  dAdjusted: number | null;
  display: string;
}

export function gaugeView(payload: ResultPayload): GaugeView {
  const solve = payload.solve;
  const optOut = payload.impact?.opt_out ?? null;
  return {
    status: solve.status,
    dBefore: solve.d_before,
    dAfter: solve.d_after,
    dAdjusted: optOut ? optOut.d_adjusted : null,
    display: `D ${formatD(solve.d_before)} -> ${formatD(solve.d_after)}`,
  };
}

export interface SwitcherRow {
  group: string;
  count: number;
}

export interface SwitcherTable {
  total: number;
  share: number;
  rows: SwitcherRow[];
}

export function switcherTable(impact: ImpactDoc): SwitcherTable {
  const rows = Object.entries(impact.per_group_switchers)
    .map(([group, count]) => ({ group, count }))
    .sort((a, b) => a.group.localeCompare(b.group));
  return { total: impact.switch_total, share: impact.switcher_share, rows };
}

export interface TravelBin {
  /** Inclusive lower edge of the minutes-delta bin. */
  from: number;
  to: number;
  label: string;
  students: number;
}

/** Histogram of per-student travel change, weighted by block flow counts. */
export function travelHistogram(impact: ImpactDoc, binWidth = 5): TravelBin[] {
  const travel = impact.travel;
  if (!travel || travel.block_flows.length === 0) return [];
  const weights = new Map<number, number>();
  for (const flow of travel.block_flows) {
    const delta = flow.minutes_after - flow.minutes_before;
    const bin = Math.floor(delta / binWidth);
    weights.set(bin, (weights.get(bin) ?? 0) + flow.count);
  }
  const bins = [...weights.keys()].sort((a, b) => a - b);
  return bins.map((bin) => {
    const from = bin * binWidth;
    const to = from + binWidth;
    return {
      from,
      to,
      label: `${from} to ${to} min`,
      students: weights.get(bin) ?? 0,
    };
  });
}

export interface SchoolRow {
  school: string;
  before: number;
  after: number;
  note: string;
}

export function schoolRows(impact: ImpactDoc): SchoolRow[] {
  return impact.per_school.map((s) => ({
    school: s.school_id,
    before: s.total_before,
    after: s.total_after,
    note: s.closed ? "closed" : s.severely_reduced ? "severely reduced" : "",
  }));
}
