/** Gateway HTTP client. The portal mutates nothing except POST /jobs. */

export interface JobRow {
  job_id: number;
  status: string;
  server_name: string;
  filter_expression: string;
  error: string;
  result: string;
}

export interface JobDetail extends JobRow {
  state: string;
  target: string;
  dataset_id: number;
  events_scanned: number;
  events_passed: number;
}

export interface NodeView {
  name: string;
  address: string;
  alive: boolean;
  last_seen: number;
  processors: number;
  load_1m: number;
  free_disk_bytes: number;
  bandwidth_bytes_per_s: number;
  fragments_held: [number, number][];
  uptime_s: number;
}

export interface DatasetView {
  dataset_id: number;
  variables: string[];
  n_fragments: number;
  total_events: number;
}

export interface SubmitRequest {
  target: string;
  filter: string;
  dataset_id: number;
  submitted_by?: string;
}

export class GatewayError extends Error {
  constructor(readonly status: number, readonly errors: string[]) {
    super(errors.join("; "));
  }
}

async function parseErrors(response: Response): Promise<string[]> {
  try {
    const body = await response.json();
    const detail = body?.detail;
    if (detail && Array.isArray(detail.errors)) return detail.errors;
    if (typeof detail === "string") return [detail];
  } catch {
    // fall through to a generic message
  }
  return [`HTTP ${response.status}`];
}

export class GatewayClient {
  constructor(readonly baseUrl: string) {}

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      headers: { Accept: "application/json" },
    });
    if (!response.ok) {
      throw new GatewayError(response.status, await parseErrors(response));
    }
    return response.json() as Promise<T>;
  }

  async ping(): Promise<boolean> {
    try {
      const response = await fetch(this.baseUrl + "/", {
        headers: { Accept: "application/json" },
      });
      return response.ok;
    } catch {
      return false;
    }
  }

  listJobs(): Promise<JobRow[]> {
    return this.get("/jobs");
  }

  getJob(jobId: number): Promise<JobDetail> {
    return this.get(`/jobs/${jobId}`);
  }

  listNodes(): Promise<NodeView[]> {
    return this.get("/nodes");
  }

  getNode(name: string): Promise<NodeView> {
    return this.get(`/nodes/${encodeURIComponent(name)}`);
  }

  listDatasets(): Promise<DatasetView[]> {
    return this.get("/datasets");
  }

  async submitJob(request: SubmitRequest): Promise<number> {
    const response = await fetch(this.baseUrl + "/jobs", {
      method: "POST",
      headers: { "Content-Type": "application/json", Accept: "application/json" },
      body: JSON.stringify(request),
    });
    if (!response.ok) {
      throw new GatewayError(response.status, await parseErrors(response));
    }
    const body = await response.json();
    return body.job_id as number;
  }

  resultUrl(jobId: number): string {
    return `${this.baseUrl}/jobs/${jobId}/result`;
  }
}
