/** View models for the merged-cluster display.
 *
 * With school coordinates we could draw a map; the bundled instances carry
 * none, so the renderer degrades to a grouped list (the layout hook stays
 * here for data that has positions).
 */

import type { Pair } from "./scenario.js";
import type { ClusterDoc, SolveDoc } from "./types.js";

export interface SpanView {
  school: string;
  /** "K-2", or null when the school serves no grades under this plan. */
  span: string | null;
}

export interface ClusterView {
  members: string[];
  merged: boolean;
  label: string;
  spans: SpanView[];
  /** Every unordered member pair, for pin/forbid chip toggling. */
  pairs: Pair[];
}

export function spanLabel(span: [string, string] | null): string | null {
  if (span === null) return null;
  const [lo, hi] = span;
  return lo === hi ? lo : `${lo}-${hi}`;
}

function clusterView(doc: ClusterDoc): ClusterView {
  const members = [...doc.members];
  const spans: SpanView[] = members.map((school) => ({
    school,
    span: spanLabel(doc.spans[school] ?? null),
  }));
  const label = spans
    .map((s) => (s.span === null ? `${s.school} (no grades)` : `${s.school} ${s.span}`))
    .join(" / ");
  const pairs: Pair[] = [];
  for (let i = 0; i < members.length; i += 1) {
    for (let j = i + 1; j < members.length; j += 1) {
      pairs.push([members[i], members[j]]);
    }
  }
  return { members, merged: members.length > 1, label, spans, pairs };
}

/** Grouped list of clusters; an infeasible result (no plan) yields []. */
export function clusterViews(solve: SolveDoc): ClusterView[] {
  if (solve.clusters === null) return [];
  return solve.clusters.map(clusterView);
}

export interface Position {
  x: number;
  y: number;
}

export interface ClusterMap {
  /** Null when any school lacks coordinates; render the list instead. */
  placed: { school: string; x: number; y: number; cluster: number }[] | null;
  clusters: ClusterView[];
}

/** Group schools for drawing. Positions are optional metadata; when any are
 * missing the map falls back to the plain list. */
export function clusterMap(
  solve: SolveDoc,
  positions?: Map<string, Position>,
): ClusterMap {
  const clusters = clusterViews(solve);
  if (!positions) return { placed: null, clusters };
  const placed: { school: string; x: number; y: number; cluster: number }[] = [];
  for (let index = 0; index < clusters.length; index += 1) {
    for (const school of clusters[index].members) {
      const at = positions.get(school);
      if (at === undefined) return { placed: null, clusters };
      placed.push({ school, x: at.x, y: at.y, cluster: index });
    }
  }
  return { placed, clusters };
}
