// Review console: queue of low-confidence cases, detail view with proposal
// overlays, and the three-way decision (approve / override / reject).

import { ApiClient } from "./api.js";
import {
  CLASS_LABELS,
  CaseRecord,
  DecisionPayload,
  ISSUE_CLASSES,
  IssueClassToken,
  QueueState,
  confidenceBand,
  decodePnm,
  formatAge,
  initialQueueState,
  reduceQueue,
  toQueueItems,
  validateDecision,
} from "./model.js";

const REFRESH_MS = 4000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class ConsoleApp {
  api: ApiClient;
  state: QueueState = initialQueueState;
  threshold = 0.8;
  activeCase: CaseRecord | null = null;
  operator = "";

  constructor(baseUrl: string) {
    this.api = new ApiClient(baseUrl);
  }

  async start(): Promise<void> {
    try {
      const config = await this.api.config();
      this.threshold = config.threshold;
      el("threshold").textContent = `review threshold ${(this.threshold * 100).toFixed(0)}%`;
    } catch {
      this.dispatch({ kind: "fetch_failed", message: "cannot reach service /config" });
    }
    el<HTMLInputElement>("operator").addEventListener("input", (e) => {
      this.operator = (e.target as HTMLInputElement).value;
    });
    el("refresh").addEventListener("click", () => void this.refresh());
    el("notice-dismiss").addEventListener("click", () => this.dispatch({ kind: "dismiss_notice" }));
    await this.refresh();
    setInterval(() => void this.refresh(), REFRESH_MS);
  }

  dispatch(event: Parameters<typeof reduceQueue>[1]): void {
    this.state = reduceQueue(this.state, event);
    this.renderQueue();
  }

  async refresh(): Promise<void> {
    try {
      const page = await this.api.reviewQueue();
      this.dispatch({ kind: "fetched", items: toQueueItems(page.cases, Date.now() / 1000), at: Date.now() });
    } catch (err) {
      this.dispatch({ kind: "fetch_failed", message: String(err) });
    }
    void this.refreshStats();
  }

  async refreshStats(): Promise<void> {
    try {
      const [cls, tp] = await Promise.all([
        this.api.classificationMetrics(),
        this.api.throughputMetrics(),
      ]);
      el("stat-throughput").textContent =
        `${tp.completed} done (last hour), queue ${tp.queue_depth}`;
      const total = cls.counts.flat().reduce((a, b) => a + b, 0);
      const agree = cls.counts.reduce((a, row, i) => a + row[i], 0);
      el("stat-review").textContent = cls.reviewed
        ? `${cls.reviewed} reviewed, model agreed ${((agree / Math.max(1, total)) * 100).toFixed(0)}%`
        : "no reviews yet";
      for (let t = 0; t < 3; t++) {
        for (let p = 0; p < 3; p++) {
          el(`cm-${t}${p}`).textContent = String(cls.counts[t]?.[p] ?? 0);
        }
      }
    } catch {
      // stats are advisory; the banner only tracks the queue fetch
    }
  }

  renderQueue(): void {
    const tbody = el<HTMLTableSectionElement>("queue-body");
    tbody.replaceChildren();
    for (const item of this.state.items) {
      const tr = document.createElement("tr");
      const conf = item.confidence;
      const band = conf === null ? "low" : confidenceBand(conf, this.threshold);
      tr.innerHTML = `
        <td class="mono">${item.caseId.slice(0, 10)}…</td>
        <td>${item.predictedClass ? CLASS_LABELS[item.predictedClass] : "—"}</td>
        <td><span class="badge badge-${band}">${conf === null ? "—" : (conf * 100).toFixed(0) + "%"}</span></td>
        <td>${formatAge(item.ageSeconds)}</td>`;
      tr.addEventListener("click", () => void this.openCase(item.caseId));
      tbody.appendChild(tr);
    }
    el("queue-count").textContent = String(this.state.items.length);
    el("queue-empty").style.display = this.state.items.length ? "none" : "block";
    el("retry-banner").style.display = this.state.fetchError ? "block" : "none";
    if (this.state.fetchError) el("retry-message").textContent = this.state.fetchError;
    const notice = el("conflict-banner");
    notice.style.display = this.state.conflictNotice ? "block" : "none";
    if (this.state.conflictNotice) el("conflict-message").textContent = this.state.conflictNotice;
  }

  async openCase(caseId: string): Promise<void> {
    try {
      this.activeCase = await this.api.caseDetail(caseId);
    } catch {
      el("detail").innerHTML = `<p class="error">case ${caseId} not found</p>`;
      return;
    }
    this.renderDetail();
    try {
      const bytes = await this.api.imageBytes(caseId);
      this.renderImage(bytes);
    } catch {
      el("canvas-note").textContent = "image unavailable";
    }
  }

  renderImage(bytes: Uint8Array): void {
    const c = this.activeCase;
    if (!c) return;
    const raster = decodePnm(bytes);
    const canvas = el<HTMLCanvasElement>("case-canvas");
    canvas.width = raster.width;
    canvas.height = raster.height;
    const ctx = canvas.getContext("2d")!;
    ctx.putImageData(new ImageData(raster.rgba, raster.width, raster.height), 0, 0);
    ctx.lineWidth = 2;
    ctx.font = "12px monospace";
    for (const p of c.proposals) {
      ctx.strokeStyle = "#ffd43b";
      ctx.strokeRect(p.x, p.y, p.w, p.h);
      ctx.fillStyle = "#ffd43b";
      ctx.fillText(p.objectness.toFixed(2), p.x + 2, p.y + 12);
    }
  }

  renderDetail(): void {
    const c = this.activeCase;
    if (!c) return;
    const decided = c.status !== "pending_review";
    const pred = c.prediction;
    el("detail-id").textContent = c.id;
    el("detail-status").textContent = c.status;
    el("detail-location").textContent = `${c.lat.toFixed(5)}, ${c.lon.toFixed(5)} via ${c.channel}`;
    el("detail-prediction").textContent = pred
      ? `${CLASS_LABELS[pred.class]} @ ${(pred.confidence * 100).toFixed(1)}%`
      : "no prediction";
    el("detail-history").textContent = c.override
      ? `decided: ${CLASS_LABELS[c.override.class]} by ${c.override.operator}`
      : decided
        ? `decided (${c.status})`
        : "";
    el("decision-form").style.display = decided ? "none" : "block";
    el("detail-readonly").style.display = decided ? "block" : "none";

    const select = el<HTMLSelectElement>("override-class");
    select.replaceChildren();
    for (const cls of ISSUE_CLASSES) {
      const opt = document.createElement("option");
      opt.value = cls;
      opt.textContent = CLASS_LABELS[cls];
      select.appendChild(opt);
    }
    el("btn-approve").onclick = () => void this.decide({ action: "approve" });
    el("btn-override").onclick = () =>
      void this.decide({ action: "override", cls: select.value as IssueClassToken });
    el("btn-reject").onclick = () =>
      void this.decide({ action: "reject", reason: el<HTMLInputElement>("reject-reason").value });
  }

  async decide(partial: { action: DecisionPayload["action"]; cls?: IssueClassToken; reason?: string }): Promise<void> {
    const c = this.activeCase;
    if (!c) return;
    const payload: DecisionPayload = {
      caseId: c.id,
      action: partial.action,
      cls: partial.cls,
      reason: partial.reason,
      operator: this.operator,
    };
    const errors = validateDecision(payload);
    const errBox = el("decision-errors");
    if (errors.length) {
      errBox.textContent = errors.join("; ");
      return; // invalid payloads never reach the network
    }
    errBox.textContent = "";
    const result = await this.api.decide(payload, c.prediction ? c.prediction.class : null);
    if (result.outcome === "ok") {
      this.dispatch({ kind: "decided", caseId: c.id });
      this.activeCase = result.caseRecord;
      this.renderDetail();
      await this.showArtifacts(c.id, partial.action !== "reject");
    } else if (result.outcome === "conflict") {
      this.dispatch({ kind: "conflict", caseId: c.id, currentStatus: result.currentStatus });
      await this.openCase(c.id); // non-destructive refresh of the detail view
    } else {
      errBox.textContent = result.message;
    }
  }

  async showArtifacts(caseId: string, dispatched: boolean): Promise<void> {
    const box = el("artifacts");
    if (!dispatched) {
      box.textContent = "case rejected";
      return;
    }
    try {
      const report = await this.api.report(caseId);
      box.textContent = String(report["narrative"] ?? JSON.stringify(report));
    } catch {
      box.textContent = "report pending…";
    }
  }
}

const base =
  new URLSearchParams(window.location.search).get("api") ??
  (window.location.pathname.startsWith("/ui") ? "" : "http://127.0.0.1:8321");
new ConsoleApp(base).start().catch((err) => {
  document.body.insertAdjacentHTML("beforeend", `<p class="error">startup failed: ${err}</p>`);
});
