"""
Commit-time policy engine: ABAC evaluation with deny-overrides, the consent
registry folded from ConsentChange transactions, alert notification fan-out,
and the contract engine that executes committed transactions in order.
"""

import json
import logging
import math
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from carechain.crypto import GroupParams, ProofTranscript, schnorr_verify
from carechain.ledger import Transaction, TxKind
from carechain.schemas import (
    AccessDecision,
    Action,
    Alert,
    AttrPredicate,
    ConsentRecord,
    DecisionRecord,
    Effect,
    Notification,
    Policy,
    Principal,
)

logger = logging.getLogger(__name__)


class PolicyConfigError(ValueError):
    """A policy predicate is malformed or references an undeclared attribute key."""


# ---------------------------------------------------------------------------
# Predicates and policies
# ---------------------------------------------------------------------------


def _check_predicate(owner: str, predicate: AttrPredicate, declared: Optional[Sequence[str]]) -> None:
    for key, expected in predicate.items():
        if declared is not None and key not in declared:
            raise PolicyConfigError(f"{owner}: attribute key '{key}' is not declared")
        if isinstance(expected, list):
            if not expected or not all(isinstance(v, str) for v in expected):
                raise PolicyConfigError(f"{owner}: membership predicate on '{key}' must be a non-empty list of strings")
        elif not isinstance(expected, str):
            raise PolicyConfigError(f"{owner}: predicate on '{key}' must be a string or a list of strings")


def matches(predicate: AttrPredicate, attributes: Dict[str, str]) -> bool:
    """Conjunction of equality / set-membership tests; the empty predicate matches everything."""
    for key, expected in predicate.items():
        value = attributes.get(key)
        if value is None:
            return False
        if isinstance(expected, list):
            if value not in expected:
                return False
        elif value != expected:
            return False
    return True


class PolicySet:
    """Policies validated against the declared subject and resource attribute keys, kept in evaluation order."""

    def __init__(self, policies: Sequence[Policy], subject_keys: Optional[Sequence[str]] = None,
                 resource_keys: Optional[Sequence[str]] = None):
        ids = [p.id for p in policies]
        if len(set(ids)) != len(ids):
            raise PolicyConfigError("policy ids must be unique")
        for p in policies:
            _check_predicate(f"policy '{p.id}' subject", p.subject, subject_keys)
            _check_predicate(f"policy '{p.id}' resource", p.resource, resource_keys)
        self.policies: List[Policy] = sorted(policies, key=lambda p: (-p.priority, p.id))
        self.subject_keys = list(subject_keys) if subject_keys is not None else None
        self.resource_keys = list(resource_keys) if resource_keys is not None else None

    def __iter__(self):
        return iter(self.policies)

    def __len__(self) -> int:
        return len(self.policies)


# ---------------------------------------------------------------------------
# Consent
# ---------------------------------------------------------------------------


def grantee_matches(grantee: Union[str, AttrPredicate], principal: Principal) -> bool:
    if isinstance(grantee, str):
        return grantee == principal.id
    return matches(grantee, principal.attributes)


class ConsentRegistry:
    """Immutable snapshot of consent records; updates return a new registry."""

    def __init__(self, records: Sequence[ConsentRecord] = ()):
        self.records: Tuple[ConsentRecord, ...] = tuple(records)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConsentRegistry) and self.fingerprint() == other.fingerprint()

    def grant(self, record: ConsentRecord) -> "ConsentRegistry":
        return ConsentRegistry(self.records + (record,))

    def revoke(self, patient_id: str, grantee: Union[str, AttrPredicate], scope: Sequence[str],
               at_ms: int) -> Tuple["ConsentRegistry", int]:
        """Revokes active grants to `grantee` overlapping `scope`; returns (registry, revoked count)."""
        out, revoked = [], 0
        for r in self.records:
            if (r.patient_id == patient_id and r.grantee == grantee and r.revoked_ms is None
                    and set(r.scope) & set(scope)):
                out.append(r.model_copy(update={"revoked_ms": max(at_ms, r.granted_ms + 1)}))
                revoked += 1
            else:
                out.append(r)
        return ConsentRegistry(out), revoked

    def is_satisfied(self, patient_id: Optional[str], principal: Principal, kind: str, at_ms: float) -> bool:
        if patient_id is None:
            return False
        for r in self.records:
            if r.patient_id != patient_id or kind not in r.scope or r.granted_ms > at_ms:
                continue
            if r.revoked_ms is not None and r.revoked_ms <= at_ms:
                continue
            if grantee_matches(r.grantee, principal):
                return True
        return False

    def fingerprint(self) -> str:
        return json.dumps([r.model_dump(mode="json") for r in self.records], sort_keys=True, separators=(",", ":"))


class ConsentChange(BaseModel):
    """Payload of a ConsentChange transaction."""
    model_config = ConfigDict(frozen=True)

    op: str = Field(..., pattern="^(grant|revoke)$")
    patient_id: str
    grantee: Union[str, AttrPredicate]
    scope: List[str] = Field(..., min_length=1)


def apply_consent(registry: ConsentRegistry, tx: Transaction) -> ConsentRegistry:
    """Folds one committed ConsentChange transaction into the registry."""
    if tx.kind != TxKind.CONSENT_CHANGE:
        raise ValueError(f"expected a ConsentChange transaction, got {tx.kind.value}")
    change = ConsentChange.model_validate_json(tx.payload)
    if change.op == "grant":
        return registry.grant(ConsentRecord(
            patient_id=change.patient_id,
            grantee=change.grantee,
            scope=change.scope,
            granted_ms=tx.created_ms,
        ))
    updated, revoked = registry.revoke(change.patient_id, change.grantee, change.scope, tx.created_ms)
    if revoked == 0:
        logger.warning(f"Revoke by {tx.sender} for patient {change.patient_id} matched no active grant; ignored.")
    return updated


def consent_signer_allowed(tx: Transaction, principals: Dict[str, Principal]) -> bool:
    """A consent change must be signed by the patient or by a principal with guardian_of=<patient>."""
    try:
        change = ConsentChange.model_validate_json(tx.payload)
    except ValidationError:
        return False
    if tx.sender == change.patient_id:
        return True
    signer = principals.get(tx.sender)
    return signer is not None and signer.attributes.get("guardian_of") == change.patient_id


# ---------------------------------------------------------------------------
# Access evaluation
# ---------------------------------------------------------------------------


def eval_access(policies: Union[PolicySet, Sequence[Policy]], principal: Principal, resource: Dict[str, str],
                action: Action, consent_view: Optional[ConsentRegistry], at_ms: float = math.inf) -> AccessDecision:
    """
    Evaluates in (priority desc, id asc) order. Any matching deny wins at once;
    otherwise the first matching permit decides, and if it requires consent the
    patient named by resource['patient'] must hold an active in-scope grant.
    No match means deny.
    """
    policy_set = policies if isinstance(policies, PolicySet) else PolicySet(policies)
    action = Action(action)
    trace: List[str] = []
    first_permit: Optional[Policy] = None
    for p in policy_set:
        trace.append(p.id)
        if p.action != action or not matches(p.subject, principal.attributes) or not matches(p.resource, resource):
            continue
        if p.effect == Effect.DENY:
            return AccessDecision(permit=False, matched_policy=p.id, consent_checked=False, trace=trace)
        if first_permit is None:
            first_permit = p

    if first_permit is None:
        return AccessDecision(permit=False, matched_policy=None, consent_checked=False, trace=trace)
    if not first_permit.requires_consent:
        return AccessDecision(permit=True, matched_policy=first_permit.id, consent_checked=False, trace=trace)
    kind = resource.get("kind", "")
    consent = consent_view or ConsentRegistry()
    if consent.is_satisfied(resource.get("patient"), principal, kind, at_ms):
        return AccessDecision(permit=True, matched_policy=first_permit.id, consent_checked=True, trace=trace)
    return AccessDecision(permit=False, matched_policy=None, consent_checked=True, trace=trace)


def on_alert(alert: Alert, alert_id: str, subscriptions: Dict[str, List[str]], policies: PolicySet,
             principals: Dict[str, Principal], resource: Dict[str, str], consent_view: ConsentRegistry,
             at_ms: float) -> Tuple[List[Notification], List[Tuple[str, AccessDecision]]]:
    """
    One notification per subscribed provider allowed to read the patient's
    alert resource, ordered by provider id. Also returns every decision made.
    """
    notifications, decisions = [], []
    for provider_id in sorted(set(subscriptions.get(alert.patient_id, []))):
        provider = principals.get(provider_id)
        if provider is None:
            logger.warning(f"Subscription of unknown principal '{provider_id}' to {alert.patient_id} skipped.")
            continue
        decision = eval_access(policies, provider, resource, Action.READ, consent_view, at_ms)
        decisions.append((provider_id, decision))
        if decision.permit:
            notifications.append(Notification(alert_id=alert_id, provider_id=provider_id,
                                              patient_id=alert.patient_id, created_ms=at_ms))
    return notifications, decisions


# ---------------------------------------------------------------------------
# Contract engine
# ---------------------------------------------------------------------------


class AccessRequest(BaseModel):
    """Payload of an AccessRequest transaction."""
    model_config = ConfigDict(frozen=True)

    request_id: str
    requester: str
    patient_id: str
    kind: str = "record"
    action: Action = Action.READ
    proof: str = Field(..., description="Hex-encoded Schnorr transcript bound to proof_context().")

    def proof_context(self) -> bytes:
        return access_proof_context(self.request_id, self.requester, self.patient_id, self.kind, self.action)


def access_proof_context(request_id: str, requester: str, patient_id: str, kind: str, action: Action) -> bytes:
    return f"carechain/access|{request_id}|{requester}|{patient_id}|{kind}|{Action(action).value}".encode("utf-8")


class ModelUpdatePayload(BaseModel):
    """Payload of a ModelUpdate transaction: Paillier ciphertexts of the count-scaled, fixed-point delta."""
    model_config = ConfigDict(frozen=True)

    node_id: str
    round: int = Field(..., ge=0)
    sample_count: int = Field(..., gt=0)
    ciphertexts: List[str]
    clipped: bool
    clip_norm: Optional[float] = None
    epsilon: Optional[float] = None
    delta_p: Optional[float] = None
    train_loss: Optional[float] = None


class RecordWrite(BaseModel):
    model_config = ConfigDict(frozen=True)

    patient_id: str
    kind: str = "record"
    summary: Dict[str, Any] = Field(default_factory=dict)


class ContractEvent(NamedTuple):
    """Side effect requested by a contract; the hosting node turns it into messages."""
    kind: str  # "notify" | "access_result" | "model_update" | "record_written"
    tx_id: str
    target: Optional[str]
    data: Any


class ContractEngine:
    """
    Executes committed transactions in chain order on the single-writer
    commit path. Holds the consent registry, the decision log and the
    notifications emitted so far.
    """

    def __init__(self, policies: PolicySet, principals: Dict[str, Principal], subscriptions: Dict[str, List[str]],
                 resources: Dict[str, Dict[str, str]], group: GroupParams, registry: Dict[str, int],
                 aggregator_id: Optional[str] = None):
        self.policies = policies
        self.principals = principals
        self.subscriptions = subscriptions
        self.resources = resources
        self.group = group
        self.registry = registry
        self.aggregator_id = aggregator_id
        self.consent = ConsentRegistry()
        self.decisions: List[DecisionRecord] = []
        self.notifications: List[Notification] = []
        self.executed = 0

    # --- admission -------------------------------------------------------

    def admit(self, tx: Transaction) -> bool:
        """Submit-time contract checks, run by the pool after signature verification."""
        if tx.kind == TxKind.CONSENT_CHANGE:
            return consent_signer_allowed(tx, self.principals)
        return True

    # --- execution -------------------------------------------------------

    def resource_attrs(self, kind: str, patient_id: Optional[str] = None, extra: Optional[Dict[str, str]] = None) -> Dict[str, str]:
        attrs = {"kind": kind}
        if patient_id is not None:
            attrs.update(self.resources.get(patient_id, {}))
            attrs["patient"] = patient_id
        attrs.update(extra or {})
        return attrs

    def _log(self, t_ms: float, principal: str, resource: Dict[str, str], action: Action, decision: AccessDecision,
             block_index: int, tx_index: int, reason: Optional[str] = None) -> None:
        resource_id = f"{resource.get('kind')}:{resource.get('patient', resource.get('org', '-'))}"
        self.decisions.append(DecisionRecord(
            t_ms=t_ms,
            principal=principal,
            resource=resource_id,
            resource_attrs=resource,
            action=action,
            permit=decision.permit,
            matched_policy=decision.matched_policy,
            consent_checked=decision.consent_checked,
            block_index=block_index,
            tx_index=tx_index,
            reason=reason,
        ))

    def execute_tx(self, tx: Transaction, at_ms: float, block_index: int, tx_index: int) -> List[ContractEvent]:
        self.executed += 1
        tx_id = tx.tx_id.hex()
        try:
            if tx.kind == TxKind.CONSENT_CHANGE:
                self.consent = apply_consent(self.consent, tx)
                return []
            if tx.kind == TxKind.ALERT:
                return self._execute_alert(tx, tx_id, at_ms, block_index, tx_index)
            if tx.kind == TxKind.ACCESS_REQUEST:
                return self._execute_access(tx, tx_id, at_ms, block_index, tx_index)
            if tx.kind == TxKind.MODEL_UPDATE:
                return self._execute_model_update(tx, tx_id, at_ms, block_index, tx_index)
            return self._execute_record_write(tx, tx_id, at_ms, block_index, tx_index)
        except (ValidationError, json.JSONDecodeError) as e:
            logger.warning(f"Transaction {tx_id[:12]} ({tx.kind.value}) has a malformed payload and was skipped: {e}")
            return []

    def execute_block(self, transactions: Sequence[Transaction], at_ms: float, block_index: int) -> List[ContractEvent]:
        events: List[ContractEvent] = []
        for i, tx in enumerate(transactions):
            events.extend(self.execute_tx(tx, at_ms, block_index, i))
        return events

    def _execute_alert(self, tx, tx_id, at_ms, block_index, tx_index) -> List[ContractEvent]:
        alert = Alert.model_validate_json(tx.payload)
        resource = self.resource_attrs("alert", alert.patient_id)
        notifications, decisions = on_alert(alert, tx_id, self.subscriptions, self.policies, self.principals,
                                            resource, self.consent, at_ms)
        for provider_id, decision in decisions:
            self._log(at_ms, provider_id, resource, Action.READ, decision, block_index, tx_index)
        self.notifications.extend(notifications)
        return [ContractEvent("notify", tx_id, n.provider_id, (n, alert)) for n in notifications]

    def _execute_access(self, tx, tx_id, at_ms, block_index, tx_index) -> List[ContractEvent]:
        request = AccessRequest.model_validate_json(tx.payload)
        resource = self.resource_attrs(request.kind, request.patient_id)
        principal = self.principals.get(request.requester)
        proof_ok = False
        if principal is not None and request.requester == tx.sender:
            try:
                transcript = ProofTranscript.from_bytes(self.group, bytes.fromhex(request.proof))
                key = self.registry.get(principal.registry_id)
                proof_ok = key is not None and schnorr_verify(self.group, key, transcript, request.proof_context())
            except ValueError:
                proof_ok = False
        if not proof_ok:
            decision = AccessDecision(permit=False, matched_policy=None, consent_checked=False, trace=[])
            self._log(at_ms, request.requester, resource, request.action, decision, block_index, tx_index,
                      reason="identity proof failed")
        else:
            decision = eval_access(self.policies, principal, resource, request.action, self.consent, at_ms)
            self._log(at_ms, request.requester, resource, request.action, decision, block_index, tx_index)
        return [ContractEvent("access_result", tx_id, request.requester, (request, decision))]

    def _execute_model_update(self, tx, tx_id, at_ms, block_index, tx_index) -> List[ContractEvent]:
        update = ModelUpdatePayload.model_validate_json(tx.payload)
        if self.aggregator_id is None:
            return []
        org = self.principals[tx.sender].attributes.get("org", tx.sender) if tx.sender in self.principals else tx.sender
        resource = self.resource_attrs("model_update", extra={"org": org})
        aggregator = self.principals.get(self.aggregator_id)
        if aggregator is None:
            return []
        decision = eval_access(self.policies, aggregator, resource, Action.AGGREGATE, self.consent, at_ms)
        self._log(at_ms, self.aggregator_id, resource, Action.AGGREGATE, decision, block_index, tx_index)
        if not decision.permit:
            return []
        return [ContractEvent("model_update", tx_id, self.aggregator_id, update)]

    def _execute_record_write(self, tx, tx_id, at_ms, block_index, tx_index) -> List[ContractEvent]:
        record = RecordWrite.model_validate_json(tx.payload)
        resource = self.resource_attrs(record.kind, record.patient_id)
        writer = self.principals.get(tx.sender, Principal(id=tx.sender))
        decision = eval_access(self.policies, writer, resource, Action.WRITE, self.consent, at_ms)
        self._log(at_ms, tx.sender, resource, Action.WRITE, decision, block_index, tx_index)
        return [ContractEvent("record_written", tx_id, None, (record, decision))] if decision.permit else []

    # --- replay ----------------------------------------------------------

    def fresh(self) -> "ContractEngine":
        return ContractEngine(self.policies, self.principals, self.subscriptions, self.resources,
                              self.group, self.registry, self.aggregator_id)

    def replay(self, journal: Iterable[Tuple[float, Sequence[Transaction]]]) -> "ContractEngine":
        """Rebuilds a new engine's state by executing (commit time, transactions) entries from the start."""
        engine = self.fresh()
        for block_index, (at_ms, txs) in enumerate(journal):
            engine.execute_block(txs, at_ms, block_index)
        return engine

    def state_fingerprint(self) -> str:
        return json.dumps({
            "consent": self.consent.fingerprint(),
            "decisions": [d.model_dump(mode="json") for d in self.decisions],
        }, sort_keys=True, separators=(",", ":"))


def chain_journal(chain) -> List[Tuple[float, Sequence[Transaction]]]:
    """(commit time, transactions) per block, as the commit path executed them."""
    return [(float(b.header.timestamp_ms), b.transactions) for b in chain.blocks]


# ---------------------------------------------------------------------------
# Independent violation oracle
# ---------------------------------------------------------------------------


def count_violations(decisions: Sequence[DecisionRecord], policies: Sequence[Policy],
                     principals: Dict[str, Principal], journal: Sequence[Tuple[float, Sequence[Transaction]]],
                     group: GroupParams, registry: Dict[str, int]) -> int:
    """
    Brute-force recheck of every permit in the decision log: some permit
    policy must match, no deny policy may match, the highest-ranked matching
    permit's consent requirement must hold against consent recomputed from
    the journal, and access requests must carry a valid identity proof.
    """
    violations = 0
    for d in decisions:
        if not d.permit:
            continue
        principal = principals.get(d.principal)
        attrs = principal.attributes if principal is not None else {}

        def hit(p: Policy) -> bool:
            if p.action != d.action:
                return False
            if any(attrs.get(k) is None or (attrs[k] not in v if isinstance(v, list) else attrs[k] != v)
                   for k, v in p.subject.items()):
                return False
            return not any(d.resource_attrs.get(k) is None
                           or (d.resource_attrs[k] not in v if isinstance(v, list) else d.resource_attrs[k] != v)
                           for k, v in p.resource.items())

        hits = [p for p in policies if hit(p)]
        permits = [p for p in hits if p.effect == Effect.PERMIT]
        if any(p.effect == Effect.DENY for p in hits) or not permits:
            violations += 1
            continue
        best = permits[0]
        for p in permits[1:]:
            if p.priority > best.priority or (p.priority == best.priority and p.id < best.id):
                best = p
        if best.id != d.matched_policy:
            violations += 1
            continue
        if best.requires_consent and not _oracle_consent(d, principal, journal):
            violations += 1
            continue
        tx = journal[d.block_index][1][d.tx_index]
        if tx.kind == TxKind.ACCESS_REQUEST and not _oracle_proof(tx, group, registry, principal):
            violations += 1
    return violations


def _oracle_consent(d: DecisionRecord, principal: Optional[Principal], journal) -> bool:
    if principal is None or "patient" not in d.resource_attrs:
        return False
    patient = d.resource_attrs["patient"]
    kind = d.resource_attrs.get("kind")
    active: List[Dict[str, Any]] = []
    for b, (_, txs) in enumerate(journal):
        for i, tx in enumerate(txs):
            if (b, i) >= (d.block_index, d.tx_index):
                break
            if tx.kind != TxKind.CONSENT_CHANGE:
                continue
            change = json.loads(tx.payload)
            if change["op"] == "grant":
                active.append({"patient": change["patient_id"], "grantee": change["grantee"],
                               "scope": change["scope"], "from": tx.created_ms, "until": None})
            else:
                for g in active:
                    if (g["patient"] == change["patient_id"] and g["grantee"] == change["grantee"]
                            and g["until"] is None and set(g["scope"]) & set(change["scope"])):
                        g["until"] = max(tx.created_ms, g["from"] + 1)
    for g in active:
        if g["patient"] != patient or kind not in g["scope"] or g["from"] > d.t_ms:
            continue
        if g["until"] is not None and g["until"] <= d.t_ms:
            continue
        grantee = g["grantee"]
        if isinstance(grantee, str):
            if grantee == principal.id:
                return True
        elif all(principal.attributes.get(k) is not None and
                 (principal.attributes[k] in v if isinstance(v, list) else principal.attributes[k] == v)
                 for k, v in grantee.items()):
            return True
    return False


def _oracle_proof(tx: Transaction, group: GroupParams, registry: Dict[str, int], principal: Principal) -> bool:
    payload = json.loads(tx.payload)
    try:
        transcript = ProofTranscript.from_bytes(group, bytes.fromhex(payload["proof"]))
    except ValueError:
        return False
    context = access_proof_context(payload["request_id"], payload["requester"], payload["patient_id"],
                                   payload.get("kind", "record"), payload.get("action", "read"))
    key = registry.get(principal.registry_id)
    return key is not None and payload["requester"] == tx.sender and schnorr_verify(group, key, transcript, context)
