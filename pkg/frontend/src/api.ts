// Thin typed client over the /v1 REST surface. The fetch implementation is
// injectable so contract tests can run against a recorded server.

import type {
  ApiError,
  EssayWire,
  FinalizedMap,
  IngestResultWire,
  ModelInfo,
  ReportDocument,
  RunSnapshot,
  ServiceConfig,
} from "./types.js";

export type FetchLike = (path: string, init?: RequestInit) => Promise<Response>;

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public body: ApiError,
  ) {
    super(`${body.code}: ${body.message}`);
  }
}

export class ApiClient {
  constructor(private fetchFn: FetchLike, private base = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) {
      let body: ApiError;
      try {
        body = (await resp.json()) as ApiError;
      } catch {
        body = { code: "http_error", message: `HTTP ${resp.status}`, details: {} };
      }
      throw new ApiRequestError(resp.status, body);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  getConfig(): Promise<ServiceConfig> {
    return this.request("/v1/config");
  }

  getModels(): Promise<{ models: ModelInfo[] }> {
    return this.request("/v1/models");
  }

  createPrompt(payload: Record<string, unknown>): Promise<{ id: string; version: number }> {
    return this.post("/v1/prompts", payload);
  }

  createRubric(payload: Record<string, unknown>): Promise<{ id: string; version: number }> {
    return this.post("/v1/rubrics", payload);
  }

  createAssignment(payload: Record<string, unknown>): Promise<{ id: string; version: number }> {
    return this.post("/v1/assignments", payload);
  }

  listPrompts(): Promise<{ prompts: Record<string, unknown>[] }> {
    return this.request("/v1/prompts");
  }

  listRubrics(): Promise<{ rubrics: Record<string, unknown>[] }> {
    return this.request("/v1/rubrics");
  }

  listEssays(assignmentId: string): Promise<{ essays: EssayWire[] }> {
    return this.request(`/v1/assignments/${assignmentId}/essays`);
  }

  ingestEssays(assignmentId: string, csv: string): Promise<IngestResultWire> {
    return this.request(`/v1/assignments/${assignmentId}/essays?format=csv`, {
      method: "POST",
      headers: { "Content-Type": "text/csv" },
      body: csv,
    });
  }

  createRun(body: {
    assignment_id?: string;
    traits: string[];
    essay_ids?: string[];
    model_overrides?: Record<string, string>;
  }): Promise<{ run_id: string }> {
    return this.post("/v1/runs", body);
  }

  getRun(runId: string): Promise<RunSnapshot> {
    return this.request(`/v1/runs/${runId}`);
  }

  listRuns(assignmentId: string): Promise<{ runs: RunSnapshot[] }> {
    return this.request(`/v1/runs?assignment_id=${encodeURIComponent(assignmentId)}`);
  }

  deleteRun(runId: string): Promise<{ deleted: string }> {
    return this.request(`/v1/runs/${runId}`, { method: "DELETE" });
  }

  getFinalized(assignmentId: string): Promise<FinalizedMap> {
    return this.request(`/v1/assignments/${assignmentId}/finalized`);
  }

  refineScore(
    assignmentId: string,
    body: { essay_id: string; trait: string; value: number; note?: string },
  ): Promise<Record<string, unknown>> {
    return this.post(`/v1/assignments/${assignmentId}/refinements`, body);
  }

  getReport(assignmentId: string): Promise<ReportDocument> {
    return this.request(`/v1/assignments/${assignmentId}/report`);
  }
}
