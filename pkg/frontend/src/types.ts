/** Payload shapes of the merger service API (v1). */

export interface DistrictSummary {
  id: string;
  name: string;
  school_count: number;
  baseline_d: number;
  baseline_c: number | null;
}

export type JobState = "queued" | "running" | "done" | "failed" | "cancelled";

export interface WhatIfRequest {
  instance_id: string;
  p_min: number;
  allow_triples: boolean;
  time_limit: number;
  seed: number;
  forbid: [string, string][];
  require: [string, string][];
  objective: string | null;
  opt_out_ratios: Record<string, number> | null;
  interdistrict: boolean;
}

export interface JobRecord {
  job_id: string;
  instance_id: string;
  state: JobState;
  config: WhatIfRequest;
  created_at: number;
  started_at: number | null;
  finished_at: number | null;
  error: string | null;
  cancel_requested: boolean;
  result: string | null;
}

export interface ClusterDoc {
  members: string[];
  spans: Record<string, [string, string] | null>;
}

export interface SolveStats {
  method: string;
  nodes: number;
  restarts: number;
  wall_time: number;
}

export interface SolveDoc {
  format: string;
  instance_name: string | null;
  school_ids: string[];
  status: "optimal" | "feasible" | "infeasible";
  d_before: number;
  d_after: number | null;
  clusters: ClusterDoc[] | null;
  stats: SolveStats;
  config: Record<string, unknown>;
}

export interface FlowDoc {
  from: string;
  to: string;
  grade: string;
  group: string;
  count: number;
}

export interface SchoolImpactDoc {
  school_id: string;
  closed: boolean;
  severely_reduced: boolean;
  ratio: number;
  t_before: number;
  t_after: number;
  w_before: number;
  w_after: number;
  total_before: number;
  total_after: number;
}

export interface TravelStats {
  count: number;
  mean_before: number;
  mean_after: number;
}

export interface BlockFlowDoc {
  block_id: string;
  from_school: string;
  to_school: string;
  group: string;
  count: number;
  minutes_before: number;
  minutes_after: number;
}

export interface TravelDoc {
  overall: TravelStats;
  per_group: Record<string, TravelStats>;
  block_flows: BlockFlowDoc[];
  diagnostics: string[];
}

export interface OptOutDoc {
  d_adjusted: number;
  ratios: Record<string, number>;
}

export interface ImpactDoc {
  d_before: number;
  d_after: number;
  switch_total: number;
  switcher_share: number;
  per_group_switchers: Record<string, number>;
  flows: FlowDoc[];
  per_school: SchoolImpactDoc[];
  travel?: TravelDoc | null;
  opt_out?: OptOutDoc | null;
  diagnostics: string[];
}

export interface ResultPayload {
  job_id: string;
  instance_id: string;
  solve: SolveDoc;
  impact?: ImpactDoc;
}

export interface CompareSummary {
  d_before: number;
  d_after: number | null;
  status: string;
  switch_total: number | null;
  switcher_share: number | null;
  mean_travel_after: number | null;
}

export interface CompareDelta {
  d_after: number | null;
  switch_total: number | null;
  switcher_share: number | null;
  mean_travel_after: number | null;
}

export interface CompareSchoolDelta {
  school_id: string;
  delta_total_after: number;
  delta_t_after: number;
  delta_w_after: number;
}

export interface ComparePayload {
  job: CompareSummary;
  base: CompareSummary;
  delta: CompareDelta;
  per_school: CompareSchoolDelta[];
}

export interface HealthDoc {
  status: string;
  instances: number;
  jobs: Record<string, number>;
}
