"""Tests for ABAC evaluation, consent, alert fan-out, the contract engine and the violation oracle."""

import json
import random

import pytest

from carechain.contracts import (
    AccessRequest,
    ConsentRegistry,
    ContractEngine,
    ModelUpdatePayload,
    PolicyConfigError,
    PolicySet,
    RecordWrite,
    apply_consent,
    consent_signer_allowed,
    count_violations,
    eval_access,
    matches,
    on_alert,
)
from carechain.crypto import group_params, keygen, schnorr_prove
from carechain.ledger import Transaction, TxKind
from carechain.schemas import (
    Action,
    AnomalyVerdict,
    Alert,
    ConsentRecord,
    DecisionRecord,
    Effect,
    Policy,
    Principal,
)

POLICIES = [
    Policy(id="clinician-read", priority=10, subject={"role": "provider"}, resource={"kind": ["record", "alert"]},
           action=Action.READ, effect=Effect.PERMIT, requires_consent=True),
    Policy(id="deny-suspended", priority=0, subject={"status": "suspended"}, action=Action.READ, effect=Effect.DENY),
    Policy(id="aggregate-models", subject={"role": "aggregator"}, resource={"kind": "model_update"},
           action=Action.AGGREGATE, effect=Effect.PERMIT),
    Policy(id="edge-write", subject={"role": "edge"}, resource={"kind": "record"}, action=Action.WRITE,
           effect=Effect.PERMIT),
]

PRINCIPALS = {
    "dr_a": Principal(id="dr_a", attributes={"role": "provider", "org": "h0"}),
    "dr_b": Principal(id="dr_b", attributes={"role": "provider", "org": "h1", "status": "suspended"}),
    "agg": Principal(id="agg", attributes={"role": "aggregator"}),
    "h0": Principal(id="h0", attributes={"role": "hospital", "org": "h0"}),
    "e0": Principal(id="e0", attributes={"role": "edge"}),
    "p00": Principal(id="p00", attributes={"role": "patient"}),
    "g0": Principal(id="g0", attributes={"role": "guardian", "guardian_of": "p00"}),
}


@pytest.fixture(scope="module")
def group():
    return group_params("test")


@pytest.fixture(scope="module")
def keys(group):
    rng = random.Random(31)
    return {pid: keygen(group, rng) for pid in PRINCIPALS}


@pytest.fixture
def engine(group, keys):
    return ContractEngine(
        PolicySet(POLICIES), PRINCIPALS, subscriptions={"p00": ["dr_b", "dr_a"]},
        resources={"p00": {"ward": "cardio"}}, group=group,
        registry={pid: kp.y for pid, kp in keys.items()}, aggregator_id="agg",
    )


def tx(group, keys, kind, payload, sender, created_ms):
    data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
    return Transaction.create(group, kind, data, sender, keys[sender], created_ms)


def consent(group, keys, op, created_ms, sender="p00", grantee="dr_a", scope=("record", "alert")):
    payload = {"op": op, "patient_id": "p00", "grantee": grantee, "scope": list(scope)}
    return tx(group, keys, TxKind.CONSENT_CHANGE, payload, sender, created_ms)


def access(group, keys, requester, created_ms, sender=None, request_id="r1", patient_id="p00"):
    request = AccessRequest(request_id=request_id, requester=requester, patient_id=patient_id, proof="")
    proof = schnorr_prove(group, keys[requester], request.proof_context(), nonce_seed=request_id)
    payload = request.model_copy(update={"proof": proof.to_bytes(group).hex()}).model_dump_json().encode()
    return tx(group, keys, TxKind.ACCESS_REQUEST, payload, sender or requester, created_ms)


def alert_for(patient_id="p00", created_ms=5000):
    verdict = AnomalyVerdict(patient_id=patient_id, window_end_ms=created_ms, flagged=True, score=9.0,
                             threshold=3.5, triggering_vital="heart_rate")
    return Alert(patient_id=patient_id, created_ms=created_ms, verdict=verdict, edge_node_id="e0")


# ---------------------------------------------------------------------------
# Predicates and policy sets
# ---------------------------------------------------------------------------


def test_predicate_matching():
    attrs = {"role": "provider", "org": "h0"}
    assert matches({}, attrs)
    assert matches({"role": "provider"}, attrs)
    assert matches({"org": ["h1", "h0"]}, attrs)
    assert not matches({"org": ["h1"]}, attrs)
    assert not matches({"ward": "cardio"}, attrs)


def test_policy_set_validation():
    with pytest.raises(PolicyConfigError):
        PolicySet([POLICIES[0], POLICIES[0]])
    with pytest.raises(PolicyConfigError):
        PolicySet(POLICIES, subject_keys=["role"])
    empty_list = Policy(id="x", subject={"role": []}, action=Action.READ, effect=Effect.PERMIT)
    with pytest.raises(PolicyConfigError):
        PolicySet([empty_list])
    ordered = PolicySet(POLICIES, subject_keys=["role", "status"], resource_keys=["kind"])
    assert [p.id for p in ordered] == ["clinician-read", "aggregate-models", "deny-suspended", "edge-write"]


# ---------------------------------------------------------------------------
# eval_access
# ---------------------------------------------------------------------------


def test_no_match_is_deny():
    decision = eval_access(POLICIES, PRINCIPALS["p00"], {"kind": "record", "patient": "p00"}, Action.READ, None)
    assert not decision.permit and decision.matched_policy is None
    assert decision.trace == ["clinician-read", "aggregate-models", "deny-suspended", "edge-write"]


def test_deny_overrides_a_higher_priority_permit():
    registry = ConsentRegistry([ConsentRecord(patient_id="p00", grantee="dr_b", scope=["record"], granted_ms=0)])
    decision = eval_access(POLICIES, PRINCIPALS["dr_b"], {"kind": "record", "patient": "p00"}, Action.READ, registry, 10)
    assert not decision.permit
    assert decision.matched_policy == "deny-suspended"


def test_permit_needs_active_consent():
    resource = {"kind": "record", "patient": "p00"}
    dr_a = PRINCIPALS["dr_a"]
    assert not eval_access(POLICIES, dr_a, resource, Action.READ, ConsentRegistry(), 10).permit

    registry = ConsentRegistry([ConsentRecord(patient_id="p00", grantee="dr_a", scope=["record"], granted_ms=100)])
    assert not eval_access(POLICIES, dr_a, resource, Action.READ, registry, 50).permit
    decision = eval_access(POLICIES, dr_a, resource, Action.READ, registry, 150)
    assert decision.permit and decision.consent_checked and decision.matched_policy == "clinician-read"

    revoked, count = registry.revoke("p00", "dr_a", ["record"], at_ms=200)
    assert count == 1
    assert eval_access(POLICIES, dr_a, resource, Action.READ, revoked, 199).permit
    assert not eval_access(POLICIES, dr_a, resource, Action.READ, revoked, 200).permit


def test_consent_scope_and_attribute_grantee():
    registry = ConsentRegistry([ConsentRecord(patient_id="p00", grantee={"org": "h0"}, scope=["alert"], granted_ms=0)])
    dr_a = PRINCIPALS["dr_a"]
    assert eval_access(POLICIES, dr_a, {"kind": "alert", "patient": "p00"}, Action.READ, registry, 1).permit
    assert not eval_access(POLICIES, dr_a, {"kind": "record", "patient": "p00"}, Action.READ, registry, 1).permit
    assert not eval_access(POLICIES, dr_a, {"kind": "alert", "patient": "p01"}, Action.READ, registry, 1).permit


# ---------------------------------------------------------------------------
# Consent transactions
# ---------------------------------------------------------------------------


def test_apply_consent_grant_and_revoke(group, keys, caplog):
    registry = apply_consent(ConsentRegistry(), consent(group, keys, "grant", 100))
    assert len(registry) == 1 and registry.records[0].granted_ms == 100
    registry = apply_consent(registry, consent(group, keys, "revoke", 100))
    assert registry.records[0].revoked_ms == 101
    unchanged = apply_consent(registry, consent(group, keys, "revoke", 300))
    assert unchanged == registry
    assert "matched no active grant" in caplog.text
    with pytest.raises(ValueError):
        apply_consent(registry, tx(group, keys, TxKind.ALERT, {"x": 1}, "e0", 0))


def test_consent_signers(group, keys):
    assert consent_signer_allowed(consent(group, keys, "grant", 1, sender="p00"), PRINCIPALS)
    assert consent_signer_allowed(consent(group, keys, "grant", 1, sender="g0"), PRINCIPALS)
    assert not consent_signer_allowed(consent(group, keys, "grant", 1, sender="dr_a"), PRINCIPALS)
    assert not consent_signer_allowed(tx(group, keys, TxKind.CONSENT_CHANGE, b"{}", "p00", 1), PRINCIPALS)


# ---------------------------------------------------------------------------
# Alert fan-out
# ---------------------------------------------------------------------------


def test_on_alert_notifies_permitted_providers_in_order(caplog):
    registry = ConsentRegistry([ConsentRecord(patient_id="p00", grantee={"role": "provider"}, scope=["alert"],
                                              granted_ms=0)])
    subs = {"p00": ["dr_b", "ghost", "dr_a", "dr_a"]}
    notifications, decisions = on_alert(alert_for(), "a1", subs, PolicySet(POLICIES), PRINCIPALS,
                                        {"kind": "alert", "patient": "p00"}, registry, 5000)
    assert [n.provider_id for n in notifications] == ["dr_a"]
    assert [(pid, d.permit) for pid, d in decisions] == [("dr_a", True), ("dr_b", False)]
    assert "ghost" in caplog.text


def test_on_alert_without_subscribers():
    notifications, decisions = on_alert(alert_for("p09"), "a1", {}, PolicySet(POLICIES), PRINCIPALS,
                                        {"kind": "alert", "patient": "p09"}, ConsentRegistry(), 0)
    assert notifications == [] and decisions == []


# ---------------------------------------------------------------------------
# Contract engine
# ---------------------------------------------------------------------------


def test_engine_access_with_valid_proof(group, keys, engine):
    engine.execute_block([consent(group, keys, "grant", 100)], 150.0, 0)
    events = engine.execute_block([access(group, keys, "dr_a", 200)], 250.0, 1)
    assert [e.kind for e in events] == ["access_result"]
    _, decision = events[0].data
    assert decision.permit
    record = engine.decisions[-1]
    assert record.resource == "record:p00" and record.resource_attrs["ward"] == "cardio"
    assert (record.block_index, record.tx_index) == (1, 0)


def test_engine_rejects_foreign_or_mismatched_proof(group, keys, engine):
    engine.execute_block([consent(group, keys, "grant", 100)], 150.0, 0)
    stolen = access(group, keys, "dr_a", 200, sender="dr_b")
    bad = AccessRequest.model_validate_json(access(group, keys, "dr_a", 200).payload)
    rebound = bad.model_copy(update={"patient_id": "p01"}).model_dump_json().encode()
    engine.execute_block([stolen, tx(group, keys, TxKind.ACCESS_REQUEST, rebound, "dr_a", 201)], 250.0, 1)
    assert [(d.permit, d.reason) for d in engine.decisions] == [(False, "identity proof failed")] * 2


def test_engine_alert_and_model_update(group, keys, engine):
    txs = [
        consent(group, keys, "grant", 100, scope=["alert"]),
        tx(group, keys, TxKind.ALERT, alert_for().model_dump_json().encode(), "e0", 120),
        tx(group, keys, TxKind.MODEL_UPDATE,
           ModelUpdatePayload(node_id="h0", round=0, sample_count=10, ciphertexts=[], clipped=False)
           .model_dump_json().encode(), "h0", 130),
        tx(group, keys, TxKind.RECORD_WRITE, RecordWrite(patient_id="p00").model_dump_json().encode(), "e0", 140),
    ]
    events = engine.execute_block(txs, 200.0, 0)
    assert [(e.kind, e.target) for e in events] == [("notify", "dr_a"), ("model_update", "agg"), ("record_written", None)]
    assert [n.provider_id for n in engine.notifications] == ["dr_a"]
    assert engine.executed == 4


def test_engine_skips_malformed_payloads(group, keys, engine, caplog):
    events = engine.execute_block([tx(group, keys, TxKind.ALERT, b"not json", "e0", 1)], 10.0, 0)
    assert events == []
    assert engine.executed == 1
    assert "malformed payload" in caplog.text


def test_engine_admission_checks_consent_signers(group, keys, engine):
    assert engine.admit(consent(group, keys, "grant", 1, sender="g0"))
    assert not engine.admit(consent(group, keys, "grant", 1, sender="dr_b"))
    assert engine.admit(access(group, keys, "dr_a", 1))


def test_replay_rebuilds_the_same_state(group, keys, engine):
    journal = [
        (150.0, [consent(group, keys, "grant", 100)]),
        (250.0, [access(group, keys, "dr_a", 200), access(group, keys, "dr_b", 210, request_id="r2")]),
        (350.0, [consent(group, keys, "revoke", 300)]),
        (450.0, [access(group, keys, "dr_a", 400, request_id="r3")]),
    ]
    for i, (at_ms, txs) in enumerate(journal):
        engine.execute_block(txs, at_ms, i)
    assert [d.permit for d in engine.decisions] == [True, False, False]
    assert engine.replay(journal).state_fingerprint() == engine.state_fingerprint()


# ---------------------------------------------------------------------------
# Violation oracle
# ---------------------------------------------------------------------------


def test_oracle_agrees_with_the_engine(group, keys, engine):
    journal = [
        (150.0, [consent(group, keys, "grant", 100)]),
        (250.0, [access(group, keys, "dr_a", 200), access(group, keys, "dr_b", 210, request_id="r2")]),
    ]
    for i, (at_ms, txs) in enumerate(journal):
        engine.execute_block(txs, at_ms, i)
    registry = engine.registry
    assert count_violations(engine.decisions, POLICIES, PRINCIPALS, journal, group, registry) == 0


def test_oracle_flags_forged_permits(group, keys, engine):
    journal = [(150.0, [access(group, keys, "dr_b", 100)])]
    engine.execute_block(journal[0][1], 150.0, 0)
    honest = engine.decisions[0]
    forged_deny = honest.model_copy(update={"permit": True, "matched_policy": "clinician-read"})
    no_consent = DecisionRecord(t_ms=150.0, principal="dr_a", resource="record:p00",
                                resource_attrs={"kind": "record", "patient": "p00"}, action=Action.READ,
                                permit=True, matched_policy="clinician-read", consent_checked=True,
                                block_index=0, tx_index=0)
    decisions = [honest, forged_deny, no_consent]
    assert count_violations(decisions, POLICIES, PRINCIPALS, journal, group, engine.registry) == 2
