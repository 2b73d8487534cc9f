// Typed wrapper over the case service HTTP API. The console changes case
// state exclusively through these documented endpoints.

import type { CaseRecord, DecisionPayload, IssueClassToken } from "./model.js";

export interface ServerConfig {
  threshold: number;
  classes: IssueClassToken[];
  standard_size: number;
}

export interface CasePage {
  cases: CaseRecord[];
  cursor: string | null;
}

export type DecisionResult =
  | { outcome: "ok"; caseRecord: CaseRecord }
  | { outcome: "conflict"; currentStatus: string }
  | { outcome: "invalid"; message: string };

export class ApiError extends Error {
  constructor(message: string, public status: number) {
    super(message);
  }
}

export class ApiClient {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(`${this.baseUrl}${path}`);
    if (!resp.ok) {
      throw new ApiError(`GET ${path} -> ${resp.status}`, resp.status);
    }
    return (await resp.json()) as T;
  }

  config(): Promise<ServerConfig> {
    return this.getJson("/config");
  }

  reviewQueue(cursor?: string, limit = 50): Promise<CasePage> {
    const params = new URLSearchParams({ status: "pending_review", limit: String(limit) });
    if (cursor) params.set("cursor", cursor);
    return this.getJson(`/cases?${params}`);
  }

  caseDetail(id: string): Promise<CaseRecord> {
    return this.getJson(`/cases/${id}`);
  }

  report(id: string): Promise<Record<string, unknown>> {
    return this.getJson(`/cases/${id}/report`);
  }

  citizenMessage(id: string): Promise<{ case_id: string; body: string }> {
    return this.getJson(`/cases/${id}/message`);
  }

  async imageBytes(id: string): Promise<Uint8Array> {
    const resp = await fetch(`${this.baseUrl}/cases/${id}/image`);
    if (!resp.ok) throw new ApiError(`image fetch -> ${resp.status}`, resp.status);
    return new Uint8Array(await resp.arrayBuffer());
  }

  classificationMetrics(): Promise<{ reviewed: number; counts: number[][] }> {
    return this.getJson("/metrics/classification");
  }

  throughputMetrics(): Promise<{ completed: number; completed_per_hour: number; queue_depth: number }> {
    return this.getJson("/metrics/throughput");
  }

  // approve sends the model's own class through the override endpoint;
  // the server records it as a confirmation-grade correction.
  async decide(payload: DecisionPayload, predictedClass: IssueClassToken | null): Promise<DecisionResult> {
    let path: string;
    let body: Record<string, unknown>;
    if (payload.action === "reject") {
      path = `/cases/${payload.caseId}/reject`;
      body = { operator: payload.operator, reason: payload.reason };
    } else {
      const cls = payload.action === "approve" ? predictedClass : payload.cls;
      path = `/cases/${payload.caseId}/override`;
      body = { class: cls, operator: payload.operator };
    }
    const resp = await fetch(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (resp.status === 200) {
      return { outcome: "ok", caseRecord: (await resp.json()) as CaseRecord };
    }
    if (resp.status === 409) {
      const err = (await resp.json()) as { current_status: string };
      return { outcome: "conflict", currentStatus: err.current_status };
    }
    if (resp.status === 400) {
      const err = (await resp.json()) as { error: string };
      return { outcome: "invalid", message: err.error };
    }
    throw new ApiError(`POST ${path} -> ${resp.status}`, resp.status);
  }
}
