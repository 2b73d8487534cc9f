import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civiscan.corpus import IssueClass
from civiscan.model import Prediction
from civiscan.workflow import (
    LEGAL_TRANSITIONS,
    Case,
    CaseStatus,
    IllegalTransitionError,
    RuleTableError,
    TemplateError,
    apply_override,
    draft_citizen_message,
    generate_report,
    load_rule_table,
    reject_case,
    render_template,
    transition,
    triage,
)

RULES = [
    {"class": "infrastructure_damage", "department": "Roads Department", "citation": "Municipal Roads Act art. 12", "priority": "high", "sla_hours": 48},
    {"class": "waste_disposal", "department": "Sanitation Unit", "citation": "Waste Management Ordinance 7/2019", "priority": "normal", "sla_hours": 72},
    {"class": "illegal_parking_misc", "department": "Public Order Office", "citation": "Traffic Code art. 143", "priority": "low", "sla_hours": 96},
]


@pytest.fixture
def rules(tmp_path):
    path = tmp_path / "rules.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in RULES) + "\n")
    return load_rule_table(path)


def make_case(status=CaseStatus.CLASSIFIED, confidence=0.95, cls=IssueClass.INFRASTRUCTURE_DAMAGE):
    probs = [0.0, 0.0, 0.0]
    probs[int(cls)] = confidence
    rest = (1.0 - confidence) / 2
    for i in range(3):
        if i != int(cls):
            probs[i] = rest
    return Case(
        id="01ARZ3NDEKTSV4RRFFQ69G5FAV",
        submitted_at=1700000000.0,
        channel="mobile_app",
        location=(45.01, 25.02),
        image_ref="blobs/x.ppm",
        status=status,
        prediction=Prediction(cls, confidence, tuple(probs)),
    )


# --- triage -------------------------------------------------------------------


def test_triage_high_confidence_dispatches():
    assert triage(make_case().prediction, 0.80) == CaseStatus.DISPATCHED


def test_triage_low_confidence_reviews():
    assert triage(make_case(confidence=0.50).prediction, 0.80) == CaseStatus.PENDING_REVIEW


def test_triage_boundary_inclusive():
    assert triage(make_case(confidence=0.80).prediction, 0.80) == CaseStatus.DISPATCHED


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_triage_monotone(conf_a, conf_b):
    lo, hi = sorted((conf_a, conf_b))
    if triage(make_case(confidence=lo).prediction, 0.8) == CaseStatus.DISPATCHED:
        assert triage(make_case(confidence=hi).prediction, 0.8) == CaseStatus.DISPATCHED


# --- state machine -------------------------------------------------------------


def test_state_machine_exhaustive():
    for src in CaseStatus:
        for dst in CaseStatus:
            case = make_case(status=src)
            if dst in LEGAL_TRANSITIONS[src]:
                transition(case, dst)
                assert case.status == dst
            else:
                with pytest.raises(IllegalTransitionError):
                    transition(case, dst)
                assert case.status == src


@given(st.lists(st.sampled_from(list(CaseStatus)), max_size=12))
@settings(max_examples=200, deadline=None)
def test_state_machine_fuzz_never_corrupts(seq):
    case = make_case(status=CaseStatus.RECEIVED)
    for dst in seq:
        before = case.status
        try:
            transition(case, dst)
        except IllegalTransitionError:
            assert case.status == before
        else:
            assert dst in LEGAL_TRANSITIONS[before]
    assert case.status in set(CaseStatus)


# --- reports ----------------------------------------------------------------------


def test_report_department_from_rule(rules):
    case = make_case()
    report = generate_report(case, rules, now=1.0)
    assert report.department == "Roads Department"
    assert "Roads Department" in report.narrative
    assert "Municipal Roads Act art. 12" in report.narrative
    assert "45.01" in report.narrative and "25.02" in report.narrative
    assert "infrastructure damage" in report.narrative


def test_report_uses_override_class(rules):
    case = make_case(status=CaseStatus.PENDING_REVIEW, confidence=0.5)
    case, correction = apply_override(case, IssueClass.WASTE_DISPOSAL, "op7", now=2.0)
    report = generate_report(case, rules, now=3.0)
    assert report.cls == IssueClass.WASTE_DISPOSAL
    assert report.department == "Sanitation Unit"
    assert not correction.confirmed


def test_report_missing_rule_names_class(tmp_path):
    path = tmp_path / "rules.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in RULES[:1]) + "\n")
    with pytest.raises(RuleTableError, match="waste_disposal"):
        load_rule_table(path)


def test_rule_table_rejects_duplicates(tmp_path):
    path = tmp_path / "rules.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in RULES + RULES[:1]) + "\n")
    with pytest.raises(RuleTableError, match="duplicate"):
        load_rule_table(path)


def test_report_deterministic(rules):
    case = make_case()
    r1 = generate_report(case, rules, now=5.0)
    r2 = generate_report(case, rules, now=5.0)
    assert r1 == r2


# --- citizen messages ----------------------------------------------------------------


def test_message_contains_case_id_and_department(rules):
    case = make_case()
    report = generate_report(case, rules, now=1.0)
    msg = draft_citizen_message(case, report, now=2.0)
    assert case.id in msg.body
    assert "Roads Department" in msg.body
    assert "48" in msg.body  # SLA expectation


def test_message_reflects_override(rules):
    case = make_case(status=CaseStatus.PENDING_REVIEW, confidence=0.4)
    case, _ = apply_override(case, IssueClass.ILLEGAL_PARKING_MISC, "op1", now=1.0)
    report = generate_report(case, rules, now=1.0)
    msg = draft_citizen_message(case, report, now=1.0)
    assert "illegal parking" in msg.body
    assert "Public Order Office" in msg.body


def test_message_deterministic(rules):
    case = make_case()
    report = generate_report(case, rules, now=1.0)
    assert draft_citizen_message(case, report, now=9.0) == draft_citizen_message(case, report, now=9.0)


# --- overrides --------------------------------------------------------------------------


def test_override_transitions_and_records():
    case = make_case(status=CaseStatus.PENDING_REVIEW, confidence=0.4)
    case, correction = apply_override(case, IssueClass.WASTE_DISPOSAL, "analyst", now=10.0)
    assert case.status == CaseStatus.DISPATCHED
    assert case.override.cls == IssueClass.WASTE_DISPOSAL
    assert correction.corrected_cls == IssueClass.WASTE_DISPOSAL
    assert correction.image_ref == case.image_ref


def test_override_wrong_status_rejected():
    case = make_case(status=CaseStatus.NOTIFIED)
    with pytest.raises(IllegalTransitionError):
        apply_override(case, IssueClass.WASTE_DISPOSAL, "analyst")


def test_override_confirmation_still_recorded():
    case = make_case(status=CaseStatus.PENDING_REVIEW, confidence=0.5, cls=IssueClass.WASTE_DISPOSAL)
    case, correction = apply_override(case, IssueClass.WASTE_DISPOSAL, "analyst", now=1.0)
    assert correction.confirmed
    assert case.status == CaseStatus.DISPATCHED


def test_reject_only_from_review():
    case = make_case(status=CaseStatus.PENDING_REVIEW)
    reject_case(case, "analyst", "duplicate submission")
    assert case.status == CaseStatus.REJECTED
    with pytest.raises(IllegalTransitionError):
        reject_case(make_case(status=CaseStatus.CLASSIFIED), "analyst", "nope")


# --- templates -----------------------------------------------------------------------------


def test_template_unresolved_placeholder_rejected():
    with pytest.raises(TemplateError, match="unresolved"):
        render_template("hello {{who}}", {})


def test_template_substitution():
    assert render_template("case {{id}} to {{dept}}", {"id": "X", "dept": "Y"}) == "case X to Y"
