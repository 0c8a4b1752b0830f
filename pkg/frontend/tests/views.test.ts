// @vitest-environment happy-dom
/** DOM-level view tests: exact table columns, stale styling, inline errors. */

import { describe, expect, it, vi } from "vitest";

import { GatewayError, JobRow, NodeView } from "../src/api.js";
import {
  ALL_SERVERS,
  EXAMPLE_FILTERS,
  JOB_COLUMNS,
  errorBanner,
  jobsTable,
  mainMenu,
  nodeDetail,
  nodesTable,
  submitForm,
} from "../src/views.js";

function job(partial: Partial<JobRow>): JobRow {
  return {
    job_id: 1, status: "Finished", server_name: "All Servers",
    filter_expression: "bx<10", error: "", result: "/jobs/1/result",
    ...partial,
  };
}

function node(partial: Partial<NodeView>): NodeView {
  return {
    name: "gandalf.adetti.iscbo.pt", address: "127.0.0.1:2135", alive: true,
    last_seen: 1_700_000_000, processors: 2, load_1m: 0.5,
    free_disk_bytes: 1 << 30, bandwidth_bytes_per_s: 0,
    fragments_held: [[1, 0], [1, 2]], uptime_s: 120,
    ...partial,
  };
}

const settle = () => new Promise((resolve) => setTimeout(resolve, 0));

describe("jobs table", () => {
  it("renders exactly the six portal columns in order", () => {
    const table = jobsTable([job({})], (id) => `/jobs/${id}/result`);
    const headers = Array.from(table.querySelectorAll("th")).map((th) => th.textContent);
    expect(headers).toEqual([...JOB_COLUMNS]);
    expect(headers).toEqual([
      "Job ID", "Status", "Server Name", "Filter Expression", "Error", "Result",
    ]);
  });

  it("sorts rows by job id and links finished results", () => {
    const rows = [
      job({ job_id: 4, status: "Running", result: "" }),
      job({ job_id: 3, filter_expression: "bx>2000&gotmean<100" }),
    ];
    const table = jobsTable(rows, (id) => `http://gw/jobs/${id}/result`);
    const body = Array.from(table.querySelectorAll("tbody tr"));
    expect(body.map((tr) => tr.firstChild!.textContent)).toEqual(["3", "4"]);
    const link = body[0].querySelector("td.result a")!;
    expect(link.getAttribute("href")).toBe("http://gw/jobs/3/result");
    expect(body[1].querySelector("td.result a")).toBeNull();
  });

  it("shows error text for failed jobs", () => {
    const table = jobsTable(
      [job({ status: "Error", error: "unrecoverable fragments: 1, 3", result: "" })],
      (id) => `/jobs/${id}/result`,
    );
    expect(table.querySelector("td.error")!.textContent)
      .toBe("unrecoverable fragments: 1, 3");
  });
});

describe("nodes views", () => {
  it("marks stale nodes visually distinct", () => {
    const table = nodesTable(
      [node({}), node({ name: "hobbit.adetti.iscbo.pt", alive: false })],
      () => undefined,
    );
    const rows = Array.from(table.querySelectorAll("tr")).slice(1);
    expect(rows[0].className).toBe("alive");
    expect(rows[1].className).toBe("stale");
    expect(rows[1].textContent).toContain("stale");
  });

  it("detail page lists held fragments", () => {
    const detail = nodeDetail(node({}));
    const items = Array.from(detail.querySelectorAll(".fragments li"));
    expect(items.map((li) => li.textContent)).toEqual([
      "dataset 1, fragment 0", "dataset 1, fragment 2",
    ]);
  });
});

describe("main menu", () => {
  it("offers the three portal options", () => {
    const menu = mainMenu(() => undefined);
    const titles = Array.from(menu.querySelectorAll("strong")).map((s) => s.textContent);
    expect(titles).toEqual(["Submit a job", "Grid node information", "Job status"]);
  });

  it("routes without reloading", () => {
    const seen: string[] = [];
    const menu = mainMenu((route) => seen.push(route));
    (menu.querySelector("a") as HTMLAnchorElement).click();
    expect(seen).toEqual(["#/submit"]);
  });
});

describe("submit form", () => {
  function build(submit = vi.fn(async () => 7)) {
    const submitted: number[] = [];
    const form = submitForm({
      nodes: [node({}), node({ name: "hobbit.adetti.iscbo.pt" })],
      datasets: [{ dataset_id: 1, total_events: 100 }],
      submit,
      onSubmitted: (id) => submitted.push(id),
    });
    document.body.replaceChildren(form);
    return { form, submit, submitted };
  }

  it("offers every node plus All Servers", () => {
    const { form } = build();
    const options = Array.from(form.querySelectorAll("select.server option"));
    expect(options.map((o) => o.textContent)).toEqual([
      ALL_SERVERS, "gandalf.adetti.iscbo.pt", "hobbit.adetti.iscbo.pt",
    ]);
    expect(options[0].getAttribute("value")).toBe("ALL");
  });

  it("inserts an example on click", () => {
    const { form } = build();
    const chip = form.querySelector("button.example") as HTMLButtonElement;
    chip.click();
    const input = form.querySelector("input.filter") as HTMLInputElement;
    expect(input.value).toBe(EXAMPLE_FILTERS[0]);
  });

  it("rejects bad syntax locally without any request", async () => {
    const { form, submit } = build();
    const input = form.querySelector("input.filter") as HTMLInputElement;
    input.value = "bx>";
    (form.querySelector("form") as HTMLFormElement)
      .dispatchEvent(new Event("submit", { cancelable: true }));
    await settle();
    expect(submit).not.toHaveBeenCalled();
    const problem = form.querySelector(".field-error") as HTMLElement;
    expect(problem.style.display).toBe("");
    expect(problem.textContent).toContain("expected numeric literal at offset 3");
  });

  it("renders server-side validation errors inline", async () => {
    const failing = vi.fn(async () => {
      throw new GatewayError(400, ["unknown variable 'zz'"]);
    });
    const { form, submitted } = build(failing);
    const input = form.querySelector("input.filter") as HTMLInputElement;
    input.value = "zz<1";
    (form.querySelector("form") as HTMLFormElement)
      .dispatchEvent(new Event("submit", { cancelable: true }));
    await settle();
    expect(submitted).toEqual([]);
    expect(form.querySelector(".field-error")!.textContent)
      .toContain("unknown variable 'zz'");
  });

  it("reports the new job id on success", async () => {
    const { form, submit, submitted } = build();
    const input = form.querySelector("input.filter") as HTMLInputElement;
    input.value = "bx>60000&gotmean<6000";
    (form.querySelector("form") as HTMLFormElement)
      .dispatchEvent(new Event("submit", { cancelable: true }));
    await settle();
    expect(submit).toHaveBeenCalledWith({
      target: "ALL", filter: "bx>60000&gotmean<6000", dataset_id: 1,
    });
    expect(submitted).toEqual([7]);
  });
});

describe("error banner", () => {
  it("retries on click", () => {
    const retry = vi.fn();
    const banner = errorBanner("gateway down", retry);
    (banner.querySelector("button") as HTMLButtonElement).click();
    expect(retry).toHaveBeenCalledOnce();
  });
});
