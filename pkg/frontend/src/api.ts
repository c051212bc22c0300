/** Thin fetch client for the merger service. All numbers shown in the UI
 * come from these payloads; nothing is recomputed client-side. */

import type {
  ComparePayload,
  DistrictSummary,
  HealthDoc,
  JobRecord,
  ResultPayload,
  WhatIfRequest,
} from "./types.js";

export const TERMINAL_STATES: ReadonlySet<string> = new Set([
  "done",
  "failed",
  "cancelled",
]);

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    if (body.detail !== undefined) return JSON.stringify(body.detail);
  } catch {
    // fall through to the status line
  }
  return response.statusText || "request failed";
}

export interface PollOptions {
  /** First wait between polls; the design calls for 1s with backoff. */
  initialMs?: number;
  factor?: number;
  maxMs?: number;
  timeoutMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as T;
  }

  health(): Promise<HealthDoc> {
    return this.request("/health");
  }

  districts(): Promise<DistrictSummary[]> {
    return this.request("/districts");
  }

  submitJob(body: WhatIfRequest): Promise<JobRecord> {
    return this.request("/jobs", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  jobs(): Promise<JobRecord[]> {
    return this.request("/jobs");
  }

  job(jobId: string): Promise<JobRecord> {
    return this.request(`/jobs/${jobId}`);
  }

  cancelJob(jobId: string): Promise<JobRecord> {
    return this.request(`/jobs/${jobId}`, { method: "DELETE" });
  }

  result(jobId: string): Promise<ResultPayload> {
    return this.request(`/jobs/${jobId}/result`);
  }

  compare(jobId: string, baseJobId: string): Promise<ComparePayload> {
    return this.request(
      `/jobs/${jobId}/compare?base=${encodeURIComponent(baseJobId)}`,
    );
  }

  /** Poll a job until it reaches a terminal state. */
  async pollUntilDone(jobId: string, options: PollOptions = {}): Promise<JobRecord> {
    const initialMs = options.initialMs ?? 1000;
    const factor = options.factor ?? 1.5;
    const maxMs = options.maxMs ?? 5000;
    const timeoutMs = options.timeoutMs ?? 180000;
    const sleep = options.sleep ?? defaultSleep;

    const started = Date.now();
    let wait = initialMs;
    for (;;) {
      const record = await this.job(jobId);
      if (TERMINAL_STATES.has(record.state)) return record;
      if (Date.now() - started > timeoutMs) {
        throw new Error(`job ${jobId} still ${record.state} after ${timeoutMs}ms`);
      }
      await sleep(wait);
      wait = Math.min(wait * factor, maxMs);
    }
  }
}
