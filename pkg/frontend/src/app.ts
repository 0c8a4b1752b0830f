/** Portal shell: hash router, polling loop, settings header. */

import { GatewayClient } from "./api.js";
import * as settings from "./settings.js";
import {
  errorBanner,
  jobsTable,
  mainMenu,
  nodeDetail,
  nodesTable,
  submitForm,
  toast,
} from "./views.js";

let client = new GatewayClient(settings.gatewayUrl());
let pollTimer: number | undefined;
let pollSeq = 0;
let appliedSeq = 0;
let pollInFlight = false;

function content(): HTMLElement {
  return document.getElementById("content") as HTMLElement;
}

function navigate(route: string): void {
  if (window.location.hash === route) {
    void render();
  } else {
    window.location.hash = route;
  }
}

function stopPolling(): void {
  if (pollTimer !== undefined) {
    window.clearInterval(pollTimer);
    pollTimer = undefined;
  }
}

async function render(): Promise<void> {
  stopPolling();
  const route = window.location.hash || "#/";
  const target = content();
  target.replaceChildren();

  if (!(await client.ping())) {
    target.appendChild(errorBanner(
      `Gateway at ${client.baseUrl} is unreachable.`, () => void render()));
    target.appendChild(mainMenuDisabled());
    return;
  }

  if (route === "#/" || route === "") {
    target.appendChild(mainMenu(navigate));
  } else if (route === "#/submit") {
    await renderSubmit(target);
  } else if (route === "#/jobs") {
    await renderJobs(target);
  } else if (route === "#/nodes") {
    await renderNodes(target);
  } else if (route.startsWith("#/nodes/")) {
    await renderNodeDetail(target, decodeURIComponent(route.slice("#/nodes/".length)));
  } else {
    target.appendChild(errorBanner("No such page.", () => navigate("#/")));
  }
}

function mainMenuDisabled(): HTMLElement {
  const menu = mainMenu(() => undefined);
  menu.classList.add("disabled");
  for (const link of Array.from(menu.querySelectorAll("a"))) {
    link.setAttribute("aria-disabled", "true");
  }
  return menu;
}

async function renderSubmit(target: HTMLElement): Promise<void> {
  const [nodes, datasets] = await Promise.all([
    client.listNodes(), client.listDatasets(),
  ]);
  target.appendChild(el2("h2", "Submit a job"));
  target.appendChild(submitForm({
    nodes,
    datasets,
    submit: (request) => client.submitJob(request),
    onSubmitted: (jobId) => {
      document.body.appendChild(toast(`Job ${jobId} submitted`));
      navigate("#/jobs");
    },
  }));
}

async function renderJobs(target: HTMLElement): Promise<void> {
  target.appendChild(el2("h2", "Job status"));
  const holder = document.createElement("div");
  holder.id = "jobs-holder";
  target.appendChild(holder);

  const refresh = async () => {
    // one in-flight poll at a time; stale responses are discarded
    if (pollInFlight) return;
    pollInFlight = true;
    const seq = ++pollSeq;
    try {
      const rows = await client.listJobs();
      if (seq > appliedSeq && document.getElementById("jobs-holder") === holder) {
        appliedSeq = seq;
        holder.replaceChildren(jobsTable(rows, (id) => client.resultUrl(id)));
      }
    } catch {
      holder.replaceChildren(errorBanner("Lost contact with the gateway.",
        () => void render()));
      stopPolling();
    } finally {
      pollInFlight = false;
    }
  };
  await refresh();
  pollTimer = window.setInterval(() => void refresh(), settings.pollIntervalMs());
}

async function renderNodes(target: HTMLElement): Promise<void> {
  target.appendChild(el2("h2", "Grid nodes"));
  const nodes = await client.listNodes();
  target.appendChild(nodesTable(nodes, (name) =>
    navigate(`#/nodes/${encodeURIComponent(name)}`)));
}

async function renderNodeDetail(target: HTMLElement, name: string): Promise<void> {
  try {
    target.appendChild(nodeDetail(await client.getNode(name)));
  } catch {
    target.appendChild(errorBanner(`No node named '${name}'.`,
      () => navigate("#/nodes")));
  }
}

function el2(tag: string, text: string): HTMLElement {
  const node = document.createElement(tag);
  node.textContent = text;
  return node;
}

function buildHeader(): void {
  const header = document.getElementById("settings") as HTMLElement;
  const input = document.createElement("input");
  input.id = "gateway-url";
  input.value = settings.gatewayUrl();
  const save = document.createElement("button");
  save.textContent = "Set gateway";
  save.addEventListener("click", () => {
    settings.setGatewayUrl(input.value);
    client = new GatewayClient(settings.gatewayUrl());
    input.value = settings.gatewayUrl();
    void render();
  });
  header.append(input, save);
}

export function boot(): void {
  buildHeader();
  window.addEventListener("hashchange", () => void render());
  void render();
}

boot();
