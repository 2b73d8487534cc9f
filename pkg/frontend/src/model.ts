// Pure domain logic for the review console: queue shaping, decision payload
// validation, confidence banding, raster decoding, and the queue-state
// reducer. Everything here is testable without a DOM or a server; every
// rendered value originates from an API response.

export type IssueClassToken =
  | "infrastructure_damage"
  | "waste_disposal"
  | "illegal_parking_misc";

export const ISSUE_CLASSES: IssueClassToken[] = [
  "infrastructure_damage",
  "waste_disposal",
  "illegal_parking_misc",
];

export const CLASS_LABELS: Record<IssueClassToken, string> = {
  infrastructure_damage: "Infrastructure damage",
  waste_disposal: "Waste disposal",
  illegal_parking_misc: "Illegal parking / misc",
};

export interface Prediction {
  class: IssueClassToken;
  confidence: number;
  probabilities: number[];
}

export interface Proposal {
  x: number;
  y: number;
  w: number;
  h: number;
  objectness: number;
}

export interface CaseOverride {
  class: IssueClassToken;
  operator: string;
  at: number;
}

export interface CaseRecord {
  id: string;
  submitted_at: number;
  channel: string;
  lat: number;
  lon: number;
  status: string;
  prediction: Prediction | null;
  proposals: Proposal[];
  override: CaseOverride | null;
  stage_timings_ms: Record<string, number>;
  error: string | null;
  has_report: boolean;
  has_message: boolean;
}

export interface ReviewQueueItem {
  caseId: string;
  submittedAt: number;
  predictedClass: IssueClassToken | null;
  confidence: number | null;
  ageSeconds: number;
}

// Queue rows mirror the server response (already ordered by id, which is
// submission order: oldest first). No client-side invention.
export function toQueueItems(cases: CaseRecord[], nowSeconds: number): ReviewQueueItem[] {
  return cases.map((c) => ({
    caseId: c.id,
    submittedAt: c.submitted_at,
    predictedClass: c.prediction ? c.prediction.class : null,
    confidence: c.prediction ? c.prediction.confidence : null,
    ageSeconds: Math.max(0, nowSeconds - c.submitted_at),
  }));
}

export type DecisionAction = "approve" | "override" | "reject";

export interface DecisionPayload {
  caseId: string;
  action: DecisionAction;
  cls?: IssueClassToken;
  operator: string;
  reason?: string;
}

// Validates before any request is sent; returns one message per bad field.
export function validateDecision(p: DecisionPayload): string[] {
  const errors: string[] = [];
  if (!p.caseId) errors.push("caseId is required");
  if (!p.operator || !p.operator.trim()) errors.push("operator is required");
  if (p.action === "override") {
    if (!p.cls || !ISSUE_CLASSES.includes(p.cls)) {
      errors.push("override requires a valid class");
    }
  }
  if (p.action === "reject") {
    if (!p.reason || !p.reason.trim()) errors.push("reject requires a reason");
  }
  return errors;
}

export function confidenceBand(confidence: number, threshold: number): "low" | "high" {
  return confidence >= threshold ? "high" : "low";
}

export function formatAge(seconds: number): string {
  if (seconds < 60) return `${Math.floor(seconds)}s`;
  if (seconds < 3600) return `${Math.floor(seconds / 60)}m`;
  return `${Math.floor(seconds / 3600)}h ${Math.floor((seconds % 3600) / 60)}m`;
}

// --- raster decoding (binary PPM/PGM, the service's image format) ------------

export interface DecodedRaster {
  width: number;
  height: number;
  rgba: Uint8ClampedArray<ArrayBuffer>;
}

export function decodePnm(bytes: Uint8Array): DecodedRaster {
  const magic = String.fromCharCode(bytes[0], bytes[1]);
  if (magic !== "P6" && magic !== "P5") {
    throw new Error(`unsupported raster magic: ${magic}`);
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // comment line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let value = 0;
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) {
      value = value * 10 + (bytes[pos] - 0x30);
      pos++;
    }
    if (pos === start) throw new Error("truncated PNM header");
    fields.push(value);
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  const channels = magic === "P6" ? 3 : 1;
  const expected = width * height * channels;
  if (bytes.length - pos < expected) throw new Error("truncated PNM payload");
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    const src = pos + i * channels;
    rgba[i * 4] = bytes[src];
    rgba[i * 4 + 1] = channels === 3 ? bytes[src + 1] : bytes[src];
    rgba[i * 4 + 2] = channels === 3 ? bytes[src + 2] : bytes[src];
    rgba[i * 4 + 3] = 255;
  }
  return { width, height, rgba };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x0a || b === 0x0d || b === 0x09;
}

// --- queue state reducer ------------------------------------------------------

export interface QueueState {
  items: ReviewQueueItem[];
  fetchError: string | null;
  conflictNotice: string | null;
  lastRefreshed: number | null;
}

export const initialQueueState: QueueState = {
  items: [],
  fetchError: null,
  conflictNotice: null,
  lastRefreshed: null,
};

export type QueueEvent =
  | { kind: "fetched"; items: ReviewQueueItem[]; at: number }
  | { kind: "fetch_failed"; message: string }
  | { kind: "decided"; caseId: string }
  | { kind: "conflict"; caseId: string; currentStatus: string }
  | { kind: "dismiss_notice" };

// Fetch failures keep the last good queue (visible retry banner, no silent
// drop); a lost decision race refreshes state without destroying anything.
export function reduceQueue(state: QueueState, event: QueueEvent): QueueState {
  switch (event.kind) {
    case "fetched":
      return { ...state, items: event.items, fetchError: null, lastRefreshed: event.at };
    case "fetch_failed":
      return { ...state, fetchError: event.message };
    case "decided":
      return { ...state, items: state.items.filter((i) => i.caseId !== event.caseId) };
    case "conflict":
      return {
        ...state,
        conflictNotice: `Case ${event.caseId} was already decided elsewhere (now ${event.currentStatus}); queue refreshed.`,
        items: state.items.filter((i) => i.caseId !== event.caseId),
      };
    case "dismiss_notice":
      return { ...state, conflictNotice: null };
  }
}
