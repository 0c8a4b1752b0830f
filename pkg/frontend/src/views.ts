/** DOM builders for the portal views. Pure functions of data + callbacks. */

import { GatewayError, JobRow, NodeView } from "./api.js";
import { syntaxProblem } from "./filter.js";

export const JOB_COLUMNS = [
  "Job ID", "Status", "Server Name", "Filter Expression", "Error", "Result",
] as const;

export const ALL_SERVERS = "All Servers";

/** The example expressions offered next to the filter field. */
export const EXAMPLE_FILTERS = [
  "bx>2000&gotmean<100",
  "bx>50000&gotmean<6000",
  "bx>60000&gotmean<6000",
  "bx>504&levr<230",
  "bx>1504&levr<1000",
  "bx>1000&levr<100",
  "evr<10",
  "bx<100",
  "bx<10",
];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function mainMenu(onNavigate: (route: string) => void): HTMLElement {
  const root = el("div", "main-menu");
  root.appendChild(el("p", "tagline",
    "Submit filter jobs, inspect grid nodes, follow job status."));
  const options: [string, string, string][] = [
    ["#/submit", "Submit a job", "Pick a server and a filter expression"],
    ["#/nodes", "Grid node information", "Processors, bandwidth, fragments held"],
    ["#/jobs", "Job status", "Live table of submitted jobs and results"],
  ];
  const list = el("nav", "menu-options");
  for (const [route, title, hint] of options) {
    const link = el("a", "menu-option");
    link.setAttribute("href", route);
    link.appendChild(el("strong", undefined, title));
    link.appendChild(el("span", undefined, hint));
    link.addEventListener("click", (event) => {
      event.preventDefault();
      onNavigate(route);
    });
    list.appendChild(link);
  }
  root.appendChild(list);
  return root;
}

export function errorBanner(message: string, onRetry: () => void): HTMLElement {
  const banner = el("div", "banner error");
  banner.appendChild(el("span", undefined, message));
  const retry = el("button", "retry", "Retry");
  retry.addEventListener("click", onRetry);
  banner.appendChild(retry);
  return banner;
}

export function jobsTable(rows: JobRow[], resultUrl: (id: number) => string): HTMLElement {
  const table = el("table", "jobs");
  const head = el("thead");
  const headRow = el("tr");
  for (const title of JOB_COLUMNS) {
    headRow.appendChild(el("th", undefined, title));
  }
  head.appendChild(headRow);
  table.appendChild(head);

  const body = el("tbody");
  for (const row of [...rows].sort((a, b) => a.job_id - b.job_id)) {
    const tr = el("tr", `status-${row.status.toLowerCase()}`);
    tr.appendChild(el("td", undefined, String(row.job_id)));
    tr.appendChild(el("td", "status", row.status));
    tr.appendChild(el("td", undefined, row.server_name));
    tr.appendChild(el("td", "filter", row.filter_expression));
    tr.appendChild(el("td", "error", row.error));
    const resultCell = el("td", "result");
    if (row.result) {
      const link = el("a", undefined, "download");
      link.setAttribute("href", resultUrl(row.job_id));
      link.setAttribute("download", `job-${row.job_id}.geb`);
      resultCell.appendChild(link);
    }
    tr.appendChild(resultCell);
    body.appendChild(tr);
  }
  table.appendChild(body);
  return table;
}

function formatBytes(n: number): string {
  if (n >= 1 << 30) return `${(n / (1 << 30)).toFixed(1)} GiB`;
  if (n >= 1 << 20) return `${(n / (1 << 20)).toFixed(1)} MiB`;
  if (n >= 1024) return `${(n / 1024).toFixed(1)} KiB`;
  return `${n} B`;
}

export function nodesTable(nodes: NodeView[], onOpen: (name: string) => void): HTMLElement {
  const table = el("table", "nodes");
  const head = el("tr");
  for (const title of ["Name", "Alive", "Processors", "Load", "Free Disk", "Fragments"]) {
    head.appendChild(el("th", undefined, title));
  }
  table.appendChild(head);
  for (const node of nodes) {
    const tr = el("tr", node.alive ? "alive" : "stale");
    const nameCell = el("td");
    const link = el("a", undefined, node.name);
    link.setAttribute("href", `#/nodes/${encodeURIComponent(node.name)}`);
    link.addEventListener("click", (event) => {
      event.preventDefault();
      onOpen(node.name);
    });
    nameCell.appendChild(link);
    tr.appendChild(nameCell);
    tr.appendChild(el("td", undefined, node.alive ? "yes" : "stale"));
    tr.appendChild(el("td", undefined, String(node.processors)));
    tr.appendChild(el("td", undefined, node.load_1m.toFixed(1)));
    tr.appendChild(el("td", undefined, formatBytes(node.free_disk_bytes)));
    tr.appendChild(el("td", undefined, String(node.fragments_held.length)));
    table.appendChild(tr);
  }
  return table;
}

export function nodeDetail(node: NodeView): HTMLElement {
  const root = el("div", `node-detail ${node.alive ? "alive" : "stale"}`);
  root.appendChild(el("h2", undefined, node.name));
  const rows: [string, string][] = [
    ["Address", node.address],
    ["Alive", node.alive ? "yes" : "stale"],
    ["Processors", String(node.processors)],
    ["Load", node.load_1m.toFixed(2)],
    ["Free disk", formatBytes(node.free_disk_bytes)],
    ["Bandwidth", node.bandwidth_bytes_per_s > 0
      ? `${formatBytes(node.bandwidth_bytes_per_s)}/s` : "unspecified"],
    ["Uptime", `${Math.round(node.uptime_s)} s`],
    ["Last seen", new Date(node.last_seen * 1000).toLocaleString()],
  ];
  const dl = el("dl", "node-fields");
  for (const [label, value] of rows) {
    dl.appendChild(el("dt", undefined, label));
    dl.appendChild(el("dd", undefined, value));
  }
  root.appendChild(dl);
  root.appendChild(el("h3", undefined,
    `Fragments held (${node.fragments_held.length})`));
  const list = el("ul", "fragments");
  for (const [dataset, index] of node.fragments_held) {
    list.appendChild(el("li", undefined, `dataset ${dataset}, fragment ${index}`));
  }
  root.appendChild(list);
  return root;
}

export interface SubmitDeps {
  nodes: NodeView[];
  datasets: { dataset_id: number; total_events: number }[];
  submit: (request: { target: string; filter: string; dataset_id: number }) =>
    Promise<number>;
  onSubmitted: (jobId: number) => void;
}

export function submitForm(deps: SubmitDeps): HTMLElement {
  const root = el("div", "submit-form");
  const form = el("form");

  const serverLabel = el("label", undefined, "Server");
  const server = el("select", "server");
  const allOption = el("option", undefined, ALL_SERVERS);
  allOption.setAttribute("value", "ALL");
  server.appendChild(allOption);
  for (const node of deps.nodes) {
    const option = el("option", undefined, node.name);
    option.setAttribute("value", node.name);
    server.appendChild(option);
  }
  serverLabel.appendChild(server);

  const datasetLabel = el("label", undefined, "Dataset");
  const dataset = el("select", "dataset");
  for (const ds of deps.datasets) {
    const option = el("option", undefined,
      `#${ds.dataset_id} (${ds.total_events} events)`);
    option.setAttribute("value", String(ds.dataset_id));
    dataset.appendChild(option);
  }
  datasetLabel.appendChild(dataset);

  const filterLabel = el("label", undefined, "Filter expression");
  const filter = el("input", "filter");
  filter.setAttribute("type", "text");
  filter.setAttribute("placeholder", "bx>2000&gotmean<100");
  filterLabel.appendChild(filter);

  const problem = el("div", "field-error");
  problem.style.display = "none";

  const examples = el("div", "examples");
  examples.appendChild(el("span", undefined, "Examples:"));
  for (const text of EXAMPLE_FILTERS) {
    const chip = el("button", "example", text);
    chip.setAttribute("type", "button");
    chip.addEventListener("click", () => {
      filter.value = text;
      problem.style.display = "none";
    });
    examples.appendChild(chip);
  }

  const submit = el("button", "submit", "Submit job");
  submit.setAttribute("type", "submit");

  form.append(serverLabel, datasetLabel, filterLabel, problem, examples, submit);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void handleSubmit();
  });
  root.appendChild(form);

  function showProblem(lines: string[]): void {
    problem.replaceChildren();
    for (const line of lines) {
      problem.appendChild(el("div", undefined, line));
    }
    problem.style.display = "";
  }

  async function handleSubmit(): Promise<void> {
    const text = filter.value.trim();
    const syntax = syntaxProblem(text);
    if (syntax) {
      // reject locally; no request leaves the browser
      showProblem([syntax.message]);
      return;
    }
    problem.style.display = "none";
    try {
      const jobId = await deps.submit({
        target: server.value,
        filter: text,
        dataset_id: Number(dataset.value),
      });
      deps.onSubmitted(jobId);
    } catch (err) {
      if (err instanceof GatewayError) {
        showProblem(err.errors);
        return;
      }
      showProblem([String(err)]);
    }
  }

  return root;
}

export function toast(message: string): HTMLElement {
  const node = el("div", "toast", message);
  setTimeout(() => node.remove(), 4000);
  return node;
}
