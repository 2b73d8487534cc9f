import assert from "node:assert/strict";
import { test } from "node:test";

import {
  CaseRecord,
  confidenceBand,
  decodePnm,
  formatAge,
  initialQueueState,
  reduceQueue,
  toQueueItems,
  validateDecision,
} from "../src/model.js";

function fakeCase(id: string, submittedAt: number, confidence = 0.4): CaseRecord {
  return {
    id,
    submitted_at: submittedAt,
    channel: "web",
    lat: 45.0,
    lon: 25.0,
    status: "pending_review",
    prediction: { class: "waste_disposal", confidence, probabilities: [0.3, confidence, 0.3] },
    proposals: [],
    override: null,
    stage_timings_ms: {},
    error: null,
    has_report: false,
    has_message: false,
  };
}

test("queue items mirror server order and compute age", () => {
  const items = toQueueItems([fakeCase("A", 100), fakeCase("B", 200)], 260);
  assert.equal(items.length, 2);
  assert.equal(items[0].caseId, "A"); // server order preserved: oldest first
  assert.equal(items[0].ageSeconds, 160);
  assert.equal(items[1].predictedClass, "waste_disposal");
});

test("decision validation catches bad payloads before send", () => {
  assert.deepEqual(
    validateDecision({ caseId: "X", action: "approve", operator: "op" }),
    [],
  );
  const noClass = validateDecision({ caseId: "X", action: "override", operator: "op" });
  assert.ok(noClass.some((e) => e.includes("class")));
  const noReason = validateDecision({ caseId: "X", action: "reject", operator: "op" });
  assert.ok(noReason.some((e) => e.includes("reason")));
  const noOperator = validateDecision({ caseId: "X", action: "approve", operator: " " });
  assert.ok(noOperator.some((e) => e.includes("operator")));
});

test("confidence banding follows the server threshold", () => {
  assert.equal(confidenceBand(0.41, 0.8), "low");
  assert.equal(confidenceBand(0.8, 0.8), "high");
});

test("age formatting", () => {
  assert.equal(formatAge(42), "42s");
  assert.equal(formatAge(90), "1m");
  assert.equal(formatAge(3700), "1h 1m");
});

test("ppm decoding produces RGBA pixels", () => {
  const header = new TextEncoder().encode("P6\n2 1\n255\n");
  const body = new Uint8Array([10, 20, 30, 40, 50, 60]);
  const bytes = new Uint8Array([...header, ...body]);
  const raster = decodePnm(bytes);
  assert.equal(raster.width, 2);
  assert.equal(raster.height, 1);
  assert.deepEqual([...raster.rgba], [10, 20, 30, 255, 40, 50, 60, 255]);
});

test("pgm decoding replicates gray into RGB", () => {
  const header = new TextEncoder().encode("P5\n1 1\n255\n");
  const raster = decodePnm(new Uint8Array([...header, 77]));
  assert.deepEqual([...raster.rgba], [77, 77, 77, 255]);
});

test("ppm decoder rejects other magics", () => {
  assert.throws(() => decodePnm(new TextEncoder().encode("P3\n1 1\n255\n0 0 0")));
});

test("queue reducer: fetch failure keeps items and shows banner", () => {
  let state = reduceQueue(initialQueueState, {
    kind: "fetched",
    items: toQueueItems([fakeCase("A", 1)], 2),
    at: 2,
  });
  state = reduceQueue(state, { kind: "fetch_failed", message: "boom" });
  assert.equal(state.items.length, 1);
  assert.equal(state.fetchError, "boom");
});

test("queue reducer: conflict removes the row and raises a notice", () => {
  let state = reduceQueue(initialQueueState, {
    kind: "fetched",
    items: toQueueItems([fakeCase("A", 1), fakeCase("B", 2)], 3),
    at: 3,
  });
  state = reduceQueue(state, { kind: "conflict", caseId: "A", currentStatus: "dispatched" });
  assert.equal(state.items.length, 1);
  assert.ok(state.conflictNotice?.includes("A"));
  assert.ok(state.conflictNotice?.includes("dispatched"));
  state = reduceQueue(state, { kind: "dismiss_notice" });
  assert.equal(state.conflictNotice, null);
});

test("queue reducer: decided removes the row", () => {
  let state = reduceQueue(initialQueueState, {
    kind: "fetched",
    items: toQueueItems([fakeCase("A", 1)], 2),
    at: 2,
  });
  state = reduceQueue(state, { kind: "decided", caseId: "A" });
  assert.equal(state.items.length, 0);
});
