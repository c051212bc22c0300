/** Browser wiring: one scenario tab, config form, result panels, compare. */

import { ApiClient, ApiError, TERMINAL_STATES } from "./api.js";
import { clusterViews } from "./clusters.js";
import { compareBadges, compareFailureMessage } from "./compare.js";
import { formatD, gaugeView, schoolRows, switcherTable, travelHistogram } from "./panels.js";
import {
  type Pair,
  type ScenarioConfig,
  buildRequest,
  clearMarks,
  cyclePair,
  forbiddenPairs,
  freshConfig,
  markOf,
  pinnedPairs,
  validate,
} from "./scenario.js";
import type { DistrictSummary, JobRecord, ResultPayload } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text) node.textContent = text;
  return node;
}

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

let client = new ApiClient(defaultBase());
let districts: DistrictSummary[] = [];
let config: ScenarioConfig = freshConfig();
let solving = false;
let lastResult: ResultPayload | null = null;

function defaultBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  if (fromQuery) return fromQuery;
  if (window.location.origin.startsWith("http")) {
    return `${window.location.origin}/api/v1`;
  }
  return "http://127.0.0.1:8765/api/v1";
}

function setStatus(text: string, isError = false): void {
  const node = byId<HTMLDivElement>("status");
  node.textContent = text;
  node.className = isError ? "status error" : "status";
}

function renderProblems(problems: string[]): void {
  const box = byId<HTMLUListElement>("problems");
  box.replaceChildren(...problems.map((p) => el("li", {}, p)));
}

function renderChips(): void {
  const box = byId<HTMLDivElement>("chips");
  box.replaceChildren();
  const add = (pair: Pair, kind: "pinned" | "forbidden") => {
    const chip = el("button", { class: `chip ${kind}`, type: "button" });
    chip.textContent = `${kind === "pinned" ? "pin" : "forbid"} ${pair[0]}+${pair[1]}`;
    chip.addEventListener("click", () => {
      cyclePair(config, pair);
      renderChips();
    });
    box.append(chip);
  };
  for (const pair of pinnedPairs(config)) add(pair, "pinned");
  for (const pair of forbiddenPairs(config)) add(pair, "forbidden");
  if (!box.hasChildNodes()) {
    box.append(el("span", { class: "muted" }, "no pinned or forbidden pairs"));
  }
}

function renderDistricts(): void {
  const select = byId<HTMLSelectElement>("district");
  select.replaceChildren(
    ...districts.map((d) =>
      el("option", { value: d.id }, `${d.name} (${d.school_count} schools, D ${formatD(d.baseline_d)})`),
    ),
  );
  if (districts.length > 0) {
    config.instanceId = districts[0].id;
    select.value = config.instanceId;
  }
}

function readForm(): void {
  config.pMin = Number(byId<HTMLInputElement>("p-min").value);
  config.allowTriples = byId<HTMLInputElement>("triples").checked;
  config.timeLimit = Number(byId<HTMLInputElement>("time-limit").value);
  config.seed = Number(byId<HTMLInputElement>("seed").value);
  config.objective = byId<HTMLInputElement>("objective").value;
  config.interdistrict = byId<HTMLInputElement>("interdistrict").checked;
  config.optOutRatios = {};
  const raw = byId<HTMLInputElement>("opt-out").value.trim();
  if (raw) {
    for (const piece of raw.split(",")) {
      const [group, value] = piece.split("=").map((s) => s.trim());
      config.optOutRatios[group ?? ""] = Number(value);
    }
  }
}

function renderResult(payload: ResultPayload): void {
  lastResult = payload;
  const gauge = gaugeView(payload);
  byId<HTMLDivElement>("gauge").textContent =
    gauge.dAdjusted === null
      ? `${gauge.display} (${gauge.status})`
      : `${gauge.display} (${gauge.status}), with opt-out ${formatD(gauge.dAdjusted)}`;

  const clusterBox = byId<HTMLUListElement>("clusters");
  clusterBox.replaceChildren();
  for (const view of clusterViews(payload.solve)) {
    const item = el("li", { class: view.merged ? "cluster merged" : "cluster" });
    item.append(el("span", {}, view.merged ? view.label : `${view.label} (unmerged)`));
    for (const pair of view.pairs) {
      const toggle = el("button", { class: "pair", type: "button" });
      const refresh = () => {
        toggle.textContent = `${pair[0]}+${pair[1]}: ${markOf(config, pair)}`;
      };
      refresh();
      toggle.addEventListener("click", () => {
        cyclePair(config, pair);
        refresh();
        renderChips();
      });
      item.append(toggle);
    }
    clusterBox.append(item);
  }
  if (!clusterBox.hasChildNodes()) {
    clusterBox.append(el("li", { class: "muted" }, "no feasible plan"));
  }

  const impact = payload.impact;
  const switchBox = byId<HTMLTableSectionElement>("switchers");
  switchBox.replaceChildren();
  const travelBox = byId<HTMLUListElement>("travel");
  travelBox.replaceChildren();
  const schoolBox = byId<HTMLTableSectionElement>("schools");
  schoolBox.replaceChildren();
  if (!impact) return;

  const table = switcherTable(impact);
  for (const row of table.rows) {
    const tr = el("tr");
    tr.append(el("td", {}, row.group), el("td", {}, String(row.count)));
    switchBox.append(tr);
  }
  const totalRow = el("tr", { class: "total" });
  totalRow.append(
    el("td", {}, "total"),
    el("td", {}, `${table.total} (${(table.share * 100).toFixed(1)}%)`),
  );
  switchBox.append(totalRow);

  const bins = travelHistogram(impact);
  const peak = Math.max(1, ...bins.map((b) => b.students));
  for (const bin of bins) {
    const item = el("li");
    const bar = el("span", { class: "bar" });
    bar.style.width = `${Math.round((bin.students / peak) * 160)}px`;
    item.append(bar, el("span", {}, ` ${bin.label}: ${bin.students} students`));
    travelBox.append(item);
  }

  for (const row of schoolRows(impact)) {
    const tr = el("tr");
    tr.append(
      el("td", {}, row.school),
      el("td", {}, String(row.before)),
      el("td", {}, String(row.after)),
      el("td", {}, row.note),
    );
    schoolBox.append(tr);
  }
}

async function refreshJobs(): Promise<void> {
  const jobs = await client.jobs();
  const select = (id: string) => byId<HTMLSelectElement>(id);
  const options = jobs
    .filter((j) => j.state === "done")
    .map((j) =>
      el(
        "option",
        { value: j.job_id },
        `${j.job_id} ${j.instance_id} p_min=${j.config.p_min}`,
      ),
    );
  select("compare-a").replaceChildren(...options.map((o) => o.cloneNode(true) as HTMLOptionElement));
  select("compare-b").replaceChildren(...options);

  const list = byId<HTMLUListElement>("jobs");
  list.replaceChildren(
    ...jobs.map((j) => {
      const item = el("li", {}, `${j.job_id} ${j.instance_id} ${j.state}`);
      if (!TERMINAL_STATES.has(j.state)) {
        const cancel = el("button", { type: "button" }, "cancel");
        cancel.addEventListener("click", () => {
          void client.cancelJob(j.job_id).then(refreshJobs);
        });
        item.append(" ", cancel);
      }
      return item;
    }),
  );
}

async function solveOnce(): Promise<void> {
  if (solving) return;
  readForm();
  const problems = validate(config);
  renderProblems(problems);
  if (problems.length > 0) return;

  solving = true;
  byId<HTMLButtonElement>("solve").disabled = true;
  try {
    const job = await client.submitJob(buildRequest(config));
    setStatus(`job ${job.job_id} ${job.state}...`);
    const finished = await client.pollUntilDone(job.job_id);
    if (finished.state === "failed") {
      setStatus(`solve failed: ${finished.error ?? "unknown error"}`, true);
      return;
    }
    const payload = await client.result(finished.job_id);
    renderResult(payload);
    setStatus(
      finished.state === "cancelled"
        ? `job ${finished.job_id} cancelled; showing best plan found`
        : `job ${finished.job_id} done`,
    );
    await refreshJobs();
  } catch (error) {
    setStatus(error instanceof ApiError ? error.detail : String(error), true);
  } finally {
    solving = false;
    byId<HTMLButtonElement>("solve").disabled = false;
  }
}

async function compareSelected(): Promise<void> {
  const a = byId<HTMLSelectElement>("compare-a").value;
  const b = byId<HTMLSelectElement>("compare-b").value;
  const box = byId<HTMLDivElement>("compare-out");
  box.replaceChildren();
  try {
    const payload = await client.compare(a, b);
    for (const badge of compareBadges(payload)) {
      box.append(el("span", { class: `badge ${badge.tone}` }, `${badge.metric}: ${badge.text}`));
    }
  } catch (error) {
    box.append(el("span", { class: "error" }, compareFailureMessage(error)));
  }
}

async function boot(): Promise<void> {
  byId<HTMLInputElement>("api-base").value = client.baseUrl;
  byId<HTMLInputElement>("api-base").addEventListener("change", (event) => {
    client = new ApiClient((event.target as HTMLInputElement).value);
    void boot();
  });
  byId<HTMLSelectElement>("district").addEventListener("change", (event) => {
    config = freshConfig((event.target as HTMLSelectElement).value);
    renderChips();
    renderProblems([]);
  });
  byId<HTMLButtonElement>("solve").addEventListener("click", () => void solveOnce());
  byId<HTMLButtonElement>("compare").addEventListener("click", () => void compareSelected());
  byId<HTMLButtonElement>("clear-marks").addEventListener("click", () => {
    clearMarks(config);
    renderChips();
    if (lastResult) renderResult(lastResult);
  });
  byId<HTMLButtonElement>("refresh-jobs").addEventListener("click", () => void refreshJobs());

  try {
    districts = await client.districts();
    renderDistricts();
    renderChips();
    setStatus(`connected; ${districts.length} districts loaded`);
    await refreshJobs();
  } catch (error) {
    setStatus(`cannot reach service at ${client.baseUrl}: ${String(error)}`, true);
  }
}

window.addEventListener("DOMContentLoaded", () => void boot());
