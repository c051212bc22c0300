import { describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import { compareBadges, compareFailureMessage, regressions } from "../src/compare.js";
import type { ComparePayload } from "../src/types.js";

function payload(delta: ComparePayload["delta"]): ComparePayload {
  const side = {
    d_before: 1,
    d_after: 0,
    status: "optimal",
    switch_total: 120,
    switcher_share: 0.5,
    mean_travel_after: null,
  };
  return { job: side, base: side, delta, per_school: [] };
}

describe("compare badges", () => {
  it("renders a self-compare as all-zero badges", () => {
    const badges = compareBadges(
      payload({ d_after: 0, switch_total: 0, switcher_share: 0, mean_travel_after: 0 }),
    );
    expect(badges).toHaveLength(4);
    expect(badges.every((b) => b.tone === "zero")).toBe(true);
    expect(regressions(badges)).toEqual([]);
  });

  it("flags positive deltas as regressions and negative as improvements", () => {
    const badges = compareBadges(
      payload({
        d_after: 0.25,
        switch_total: -40,
        switcher_share: 0,
        mean_travel_after: null,
      }),
    );
    const byMetric = new Map(badges.map((b) => [b.metric, b]));
    expect(byMetric.get("segregation (D)")?.tone).toBe("worse");
    expect(byMetric.get("segregation (D)")?.text).toBe("+0.250");
    expect(byMetric.get("students switching")?.tone).toBe("better");
    expect(byMetric.get("mean travel (min)")?.tone).toBe("unknown");
    expect(regressions(badges).map((b) => b.metric)).toEqual(["segregation (D)"]);
  });

  it("treats sub-tolerance wobble as zero", () => {
    const badges = compareBadges(
      payload({ d_after: 1e-15, switch_total: 0, switcher_share: 0, mean_travel_after: 0 }),
    );
    expect(badges[0].tone).toBe("zero");
  });
});

describe("compare failure messages", () => {
  it("surfaces a 409 as a user-facing explanation", () => {
    const message = compareFailureMessage(
      new ApiError(409, "jobs ran on different instances"),
    );
    expect(message).toBe("cannot compare yet: jobs ran on different instances");
  });

  it("passes through other errors readably", () => {
    expect(compareFailureMessage(new ApiError(404, "unknown job 'x'"))).toBe(
      "unknown job 'x'",
    );
    expect(compareFailureMessage(new Error("network down"))).toBe("network down");
  });
});
