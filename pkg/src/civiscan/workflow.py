"""Case lifecycle: triage routing, dispatch reports, citizen messages.

The state machine is strict: any transition outside the legal set raises.
Report and message text comes from reviewable template files with
{{placeholder}} substitution, never from code; the class -> regulation
mapping is a configured rule table with exactly one rule per issue class.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .corpus import CLASS_TOKENS, TOKEN_CLASSES, IssueClass
from .model import Prediction

DEFAULT_TRIAGE_THRESHOLD = 0.80

CLASS_LABELS = {
    IssueClass.INFRASTRUCTURE_DAMAGE: "infrastructure damage",
    IssueClass.WASTE_DISPOSAL: "waste disposal",
    IssueClass.ILLEGAL_PARKING_MISC: "illegal parking / miscellaneous",
}

CHANNELS = ("mobile_app", "web", "email")
PRIORITIES = ("high", "normal", "low")


class WorkflowError(ValueError):
    pass


class IllegalTransitionError(WorkflowError):
    pass


class RuleTableError(WorkflowError):
    pass


class TemplateError(WorkflowError):
    pass


class CaseStatus(str, Enum):
    RECEIVED = "received"
    PREPROCESSED = "preprocessed"
    CLASSIFIED = "classified"
    PENDING_REVIEW = "pending_review"
    DISPATCHED = "dispatched"
    NOTIFIED = "notified"
    REJECTED = "rejected"


LEGAL_TRANSITIONS = {
    CaseStatus.RECEIVED: {CaseStatus.PREPROCESSED},
    CaseStatus.PREPROCESSED: {CaseStatus.CLASSIFIED},
    CaseStatus.CLASSIFIED: {CaseStatus.DISPATCHED, CaseStatus.PENDING_REVIEW},
    CaseStatus.PENDING_REVIEW: {CaseStatus.DISPATCHED, CaseStatus.REJECTED},
    CaseStatus.DISPATCHED: {CaseStatus.NOTIFIED},
    CaseStatus.NOTIFIED: set(),
    CaseStatus.REJECTED: set(),
}


@dataclass
class Override:
    cls: IssueClass
    operator: str
    at: float  # unix seconds


@dataclass
class Case:
    id: str
    submitted_at: float
    channel: str
    location: tuple  # (lat, lon)
    image_ref: str
    status: CaseStatus = CaseStatus.RECEIVED
    prediction: Prediction | None = None
    proposals: list = field(default_factory=list)
    override: Override | None = None
    stage_timings: dict = field(default_factory=dict)
    error: str | None = None
    idempotency_key: str | None = None

    def final_class(self) -> IssueClass:
        if self.override is not None:
            return self.override.cls
        if self.prediction is not None:
            return self.prediction.cls
        raise WorkflowError(f"case {self.id} has no final class yet")


def transition(case: Case, new_status: CaseStatus) -> None:
    if new_status not in LEGAL_TRANSITIONS[case.status]:
        raise IllegalTransitionError(
            f"case {case.id}: illegal transition {case.status.value} -> {new_status.value}"
        )
    case.status = new_status


@dataclass(frozen=True)
class RegulationRule:
    cls: IssueClass
    department: str
    regulation_citation: str
    priority: str
    sla_hours: int


class RuleTable:
    def __init__(self, rules: dict):
        self.rules = rules

    def rule_for(self, cls: IssueClass) -> RegulationRule:
        if cls not in self.rules:
            raise RuleTableError(f"no regulation rule configured for class {CLASS_TOKENS[cls]}")
        return self.rules[cls]


def load_rule_table(path) -> RuleTable:
    """Line-delimited JSON rules; exactly one rule per issue class."""
    rules: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                cls = TOKEN_CLASSES[obj["class"]]
                rule = RegulationRule(
                    cls=cls,
                    department=obj["department"],
                    regulation_citation=obj["citation"],
                    priority=obj["priority"],
                    sla_hours=int(obj["sla_hours"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RuleTableError(f"{path} line {line_no}: {exc}") from exc
            if rule.priority not in PRIORITIES:
                raise RuleTableError(f"{path} line {line_no}: bad priority {rule.priority!r}")
            if cls in rules:
                raise RuleTableError(f"{path} line {line_no}: duplicate rule for {CLASS_TOKENS[cls]}")
            rules[cls] = rule
    for cls in IssueClass:
        if cls not in rules:
            raise RuleTableError(f"rule table {path} is missing class {CLASS_TOKENS[cls]}")
    return RuleTable(rules)


# --- templates -------------------------------------------------------------------

_TEMPLATE_DIR = Path(__file__).parent / "templates"


def render_template(text: str, values: dict) -> str:
    out = text
    for key, val in values.items():
        out = out.replace("{{" + key + "}}", str(val))
    if "{{" in out:
        start = out.index("{{")
        raise TemplateError(f"unresolved placeholder near: {out[start : start + 40]!r}")
    return out


def load_template(name: str, template_dir=None) -> str:
    base = Path(template_dir) if template_dir else _TEMPLATE_DIR
    path = base / name
    if not path.exists():
        raise TemplateError(f"template not found: {path}")
    return path.read_text(encoding="utf-8")


# --- operations -------------------------------------------------------------------


def triage(prediction: Prediction, threshold: float = DEFAULT_TRIAGE_THRESHOLD) -> CaseStatus:
    """Route by confidence: >= threshold dispatches, below goes to review."""
    if not (0.0 < threshold <= 1.0):
        raise WorkflowError(f"threshold must lie in (0, 1], got {threshold}")
    return CaseStatus.DISPATCHED if prediction.confidence >= threshold else CaseStatus.PENDING_REVIEW


@dataclass
class DispatchReport:
    case_id: str
    department: str
    regulation_citation: str
    cls: IssueClass
    confidence: float
    location: tuple
    created_at: float
    priority: str
    sla_hours: int
    narrative: str


@dataclass
class CitizenMessage:
    case_id: str
    created_at: float
    body: str


def generate_report(case: Case, rules: RuleTable, template_dir=None, now: float | None = None) -> DispatchReport:
    """Fill the dispatch narrative for the case's final class.

    Narrative text is deterministic given case, rule table and template;
    only created_at carries the clock.
    """
    cls = case.final_class()
    rule = rules.rule_for(cls)
    confidence = case.prediction.confidence if case.prediction else 1.0
    lat, lon = case.location
    narrative = render_template(
        load_template("dispatch_report.txt", template_dir),
        {
            "case_id": case.id,
            "class_label": CLASS_LABELS[cls],
            "department": rule.department,
            "citation": rule.regulation_citation,
            "priority": rule.priority,
            "sla_hours": rule.sla_hours,
            "lat": f"{lat:.6f}",
            "lon": f"{lon:.6f}",
            "confidence_pct": f"{confidence * 100:.1f}",
            "channel": case.channel,
        },
    )
    return DispatchReport(
        case_id=case.id,
        department=rule.department,
        regulation_citation=rule.regulation_citation,
        cls=cls,
        confidence=confidence,
        location=case.location,
        created_at=time.time() if now is None else now,
        priority=rule.priority,
        sla_hours=rule.sla_hours,
        narrative=narrative,
    )


def draft_citizen_message(case: Case, report: DispatchReport, template_dir=None, now: float | None = None) -> CitizenMessage:
    """Acknowledgment for the submitter: receipt, detected class, action, SLA."""
    body = render_template(
        load_template("citizen_message.txt", template_dir),
        {
            "case_id": case.id,
            "class_label": CLASS_LABELS[report.cls],
            "department": report.department,
            "sla_hours": report.sla_hours,
        },
    )
    return CitizenMessage(case_id=case.id, created_at=time.time() if now is None else now, body=body)


@dataclass
class CorrectionRecord:
    """A review decision exported later as training-grade label data."""

    case_id: str
    image_ref: str
    corrected_cls: IssueClass
    operator: str
    at: float
    confirmed: bool  # operator agreed with the model


def apply_override(case: Case, corrected_class: IssueClass, operator: str, now: float | None = None):
    """Operator decision on a review-queue case; returns (case, correction).

    Confirming the model's own class is still recorded: confirmations are
    valid training labels.
    """
    if case.status != CaseStatus.PENDING_REVIEW:
        raise IllegalTransitionError(
            f"case {case.id}: override only applies to pending_review cases (status {case.status.value})"
        )
    at = time.time() if now is None else now
    case.override = Override(cls=corrected_class, operator=operator, at=at)
    transition(case, CaseStatus.DISPATCHED)
    confirmed = case.prediction is not None and case.prediction.cls == corrected_class
    correction = CorrectionRecord(
        case_id=case.id,
        image_ref=case.image_ref,
        corrected_cls=corrected_class,
        operator=operator,
        at=at,
        confirmed=confirmed,
    )
    return case, correction


def reject_case(case: Case, operator: str, reason: str) -> Case:
    if case.status != CaseStatus.PENDING_REVIEW:
        raise IllegalTransitionError(
            f"case {case.id}: reject only applies to pending_review cases (status {case.status.value})"
        )
    transition(case, CaseStatus.REJECTED)
    case.error = None
    return case
