import type {
  QueryResponse,
  RecordDetail,
  SearchOptions,
  SessionSubmission,
  StudyProgress,
  StudyReport,
  TaskInfo,
} from "./types";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function readDetail(resp: Response): Promise<string> {
  try {
    const body = await resp.json();
    return typeof body?.detail === "string" ? body.detail : JSON.stringify(body);
  } catch {
    return resp.statusText;
  }
}

/**
 * Typed client for the retrieval/study service.
 *
 * The fetch implementation is injectable so tests can capture every
 * outgoing request. In study mode, callers pass participant and task ids
 * and the server resolves the variant; this client has no notion of the
 * variant-to-system mapping at all.
 */
export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!resp.ok) throw new ApiError(resp.status, await readDetail(resp));
    return (await resp.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) throw new ApiError(resp.status, await readDetail(resp));
    return (await resp.json()) as T;
  }

  health(): Promise<{ status: string; records: number }> {
    return this.get("/healthz");
  }

  getRecord(recordId: string): Promise<RecordDetail> {
    return this.get(`/records/${encodeURIComponent(recordId)}`);
  }

  searchByRecord(recordId: string, options: SearchOptions = {}): Promise<QueryResponse> {
    const body: Record<string, unknown> = { record_id: recordId };
    if (options.k !== undefined) body.k = options.k;
    if (options.cutoffDate) body.cutoff_date = options.cutoffDate;
    if (options.variant) body.variant = options.variant;
    if (options.participantId && options.taskId) {
      body.participant_id = options.participantId;
      body.task_id = options.taskId;
    }
    return this.post("/query", body);
  }

  searchByVector(vector: number[], cutoffDate: string, k = 10): Promise<QueryResponse> {
    return this.post("/query", { vector, cutoff_date: cutoffDate, k });
  }

  fetchTasks(participantId: string): Promise<{ participant_id: string; tasks: TaskInfo[] }> {
    return this.get(`/study/tasks?participant_id=${encodeURIComponent(participantId)}`);
  }

  fetchProgress(participantId: string): Promise<StudyProgress> {
    return this.get(`/study/progress?participant_id=${encodeURIComponent(participantId)}`);
  }

  submitSession(submission: SessionSubmission): Promise<Record<string, unknown>> {
    return this.post("/sessions", submission);
  }

  fetchReport(): Promise<StudyReport> {
    return this.get("/study/report");
  }

  imageUrl(recordId: string): string {
    return `${this.baseUrl}/images/${encodeURIComponent(recordId)}`;
  }
}
