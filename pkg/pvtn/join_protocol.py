"""
Join Protocol Module for PVTN

Four phases:
- I   the candidate seals JoinInfo, PK_c and a nonce r to its manager;
      the manager checks freshness and admission and sends h = H(PK_c) up
- II  the root checks its own members, probes every manager child, each
      manager checks its members and probes its own manager children;
      answers are OR-ed bottom-up (a local YES stops the broadcast below)
- III the root signs Dec_h = (h, D, t, Reason); every node verifies its
      parent's signature, logs the record and re-signs it for its children
- IV  the initiating manager matches the decision to its pending request
      and issues Cert_c bound to r, or returns a sealed rejection

Handlers are registered with the world through install().
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional

from pvtn.codec import encode
from pvtn.crypto import CryptoProvider, Digest, PublicKey, Signature, fingerprint
from pvtn.errors import (
    ConflictDetected,
    DecisionMismatch,
    IssuerRevoked,
    NotAManager,
    NotAuthorized,
    PvtnError,
    ReplayRejected,
    SignatureInvalid,
    StaleDecision,
)
from pvtn.messaging import ControlPayload, Envelope, MsgType
from pvtn.overlay import RouteMode
from pvtn.tree import (
    DelegationCertificate,
    DelegationMode,
    NodeRecord,
    Role,
    attach_child,
    issue_delegation,
)

if TYPE_CHECKING:
    from pvtn.world import World


class Answer(str, Enum):
    YES = "YES"
    NO = "NO"


class Verdict(str, Enum):
    APPROVE = "APPROVE"
    REJECT = "REJECT"


@dataclass(frozen=True)
class JoinRequest:
    join_info: str
    candidate_pk: PublicKey
    nonce: bytes

    def to_body(self) -> dict:
        return {"join_info": self.join_info, "candidate_pk": self.candidate_pk, "nonce": self.nonce}

    @classmethod
    def from_body(cls, body: dict) -> "JoinRequest":
        return cls(str(body["join_info"]), bytes(body["candidate_pk"]), bytes(body["nonce"]))


@dataclass(frozen=True)
class HashProbe:
    h: Digest
    trace_id: str
    direction: str = "up"

    def to_body(self) -> dict:
        return {"h": self.h, "direction": self.direction}


@dataclass(frozen=True)
class ConflictResponse:
    answer: Answer
    trace_id: str
    h: Digest
    responder_digest: bytes = b""

    def to_body(self) -> dict:
        return {"answer": self.answer.value, "h": self.h}


@dataclass(frozen=True)
class DecisionRecord:
    """Dec_h, signed by the node that forwards it."""

    h: Digest
    decision: Verdict
    t: int
    reason: str
    signer_digest: Digest
    signature: Signature

    @staticmethod
    def body(h: Digest, decision: Verdict, t: int, reason: str) -> bytes:
        return encode({"h": h, "decision": decision.value, "t": t, "reason": reason})

    @classmethod
    def create(cls, provider: CryptoProvider, signer: NodeRecord, h: Digest, decision: Verdict,
               t: int, reason: str = "") -> "DecisionRecord":
        signature = provider.sign(signer.keys.private, cls.body(h, decision, t, reason))
        return cls(h, decision, t, reason, signer.node_id, signature)

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        if provider.hash(pk) != self.signer_digest:
            return False
        return provider.verify(pk, self.body(self.h, self.decision, self.t, self.reason), self.signature)

    def to_wire(self) -> dict:
        return {
            "h": self.h,
            "decision": self.decision.value,
            "t": self.t,
            "reason": self.reason,
            "signer": self.signer_digest,
            "signature": self.signature.to_wire(),
        }

    @classmethod
    def from_wire(cls, data: dict) -> "DecisionRecord":
        return cls(
            h=bytes(data["h"]),
            decision=Verdict(data["decision"]),
            t=int(data["t"]),
            reason=str(data["reason"]),
            signer_digest=bytes(data["signer"]),
            signature=Signature.from_wire(data["signature"]),
        )


@dataclass
class PendingJoin:
    request: JoinRequest
    trace_id: str
    started: int
    expires: int


@dataclass
class Aggregation:
    h: Digest
    trace_id: str
    own: Answer
    reply_to: Optional[PublicKey]
    waiting: set = field(default_factory=set)
    answers: dict = field(default_factory=dict)
    done: bool = False
    timer: object = None


@dataclass
class CandidateState:
    manager_pk: PublicKey
    nonce: bytes
    trace_id: str
    status: str = "pending"
    reason: str = ""


def aggregation_timeout(world: "World", node: NodeRecord) -> int:
    height = world.view(node.tenant).height() if node.tenant else 1
    return world.settings.aggregation_factor * max(1, height) * world.topology.max_latency()


def _pending_expiry(world: "World", node: NodeRecord) -> int:
    height = world.view(node.tenant).height() if node.tenant else 1
    return aggregation_timeout(world, node) + (2 * max(1, height) + 1) * world.topology.max_latency()


def _name_of(world: "World", pk: PublicKey) -> str:
    record = world.locate(None, world.provider.hash(pk))
    return record.name if record is not None else fingerprint(world.provider.hash(pk))


def initiate_join(world: "World", candidate: NodeRecord, manager_pk: PublicKey,
                  mode: RouteMode = RouteMode.DIRECT_IP, join_info: str = "member") -> str:
    """
    Phase I, candidate side: seal a join request to the manager.

    Returns:
        str: trace id of the join run

    Raises:
        KeyNotVisible: the manager's key was never disclosed to the candidate
    """
    trace_id = world.new_trace_id()
    nonce = world.provider.new_nonce(world.rng)
    request = JoinRequest(join_info, candidate.public, nonce)
    world.send(candidate, manager_pk, MsgType.JOIN_REQ, request.to_body(), trace_id,
               signed=False, mode=mode, nonce=nonce)
    candidate.proto.candidate = CandidateState(manager_pk, nonce, trace_id)
    world.outcome(trace_id, "join", candidate.name)
    candidate.audit(world.now, "join_request", f"mode={mode.value}")
    return trace_id


def handle_join_request(world: "World", manager: NodeRecord, req: JoinRequest, trace_id: str) -> HashProbe:
    """
    Phase I, manager side: admit the request and start conflict detection.

    Raises:
        NotAManager: the recipient is a leaf
        IssuerRevoked: the recipient has been revoked
        NotAuthorized: the candidate key was never invited by this manager
        ReplayRejected: the same (h, r) is already pending
    """
    if not manager.can_issue():
        raise NotAManager(f"{manager.name} is a leaf and cannot admit members")
    if manager.revoked:
        raise IssuerRevoked(f"{manager.name} is revoked")
    h = world.provider.hash(req.candidate_pk)
    if h not in manager.admission:
        raise NotAuthorized(f"{manager.name} never invited key {fingerprint(h)}")
    key = (h, req.nonce)
    if key in manager.proto.pending_joins:
        raise ReplayRejected(f"join {fingerprint(h)} already pending at {manager.name}")

    view = world.view(manager.tenant)
    outcome = world.outcome(trace_id, "join", _name_of(world, req.candidate_pk))
    outcome.detail["manager"] = manager.name
    outcome.detail["conflict_at_start"] = any(m.node_id == h for m in view.members())

    expiry = _pending_expiry(world, manager)
    manager.proto.pending_joins[key] = PendingJoin(req, trace_id, world.now, world.now + expiry)
    manager.pending_peers.add(req.candidate_pk)
    manager.audit(world.now, "join_request", fingerprint(h))
    world.after(expiry, lambda: _expire_pending(world, manager, key))

    probe = HashProbe(h, trace_id)
    if manager.role == Role.ROOT:
        start_conflict_check(world, manager, h, trace_id)
    else:
        world.send(manager, manager.parent, MsgType.HASH_PROBE, probe.to_body(), trace_id)
    return probe


def conflict_check_local(provider: CryptoProvider, manager: NodeRecord, h: Digest) -> Answer:
    """YES iff a live direct member of this manager (or the root itself) has digest h."""
    if manager.role == Role.ROOT and manager.node_id == h:
        return Answer.YES
    for child_pk in manager.children:
        digest = provider.hash(child_pk)
        if digest == h and digest not in manager.revocations:
            return Answer.YES
    return Answer.NO


def combine(own: Answer, responses: list) -> Answer:
    return Answer.YES if own == Answer.YES or any(r == Answer.YES for r in responses) else Answer.NO


def start_conflict_check(world: "World", root: NodeRecord, h: Digest, trace_id: str) -> None:
    """Phase II at the root."""
    root.audit(world.now, "conflict_check", fingerprint(h))
    _local_round(world, root, h, trace_id, reply_to=None)


def _manager_children(world: "World", node: NodeRecord) -> list:
    return [pk for pk, role in node.children.items()
            if role == Role.MANAGER and world.provider.hash(pk) not in node.revocations]


def _local_round(world: "World", node: NodeRecord, h: Digest, trace_id: str,
                 reply_to: Optional[PublicKey]) -> None:
    own = conflict_check_local(world.provider, node, h)
    children = [] if own == Answer.YES else _manager_children(world, node)
    if not children:
        _answer(world, node, own, h, trace_id, reply_to)
        return

    agg = Aggregation(h=h, trace_id=trace_id, own=own, reply_to=reply_to,
                      waiting={world.provider.hash(pk) for pk in children})
    key = (trace_id, h)
    node.proto.aggregations[key] = agg
    for pk in children:
        world.send(node, pk, MsgType.HASH_PROBE, HashProbe(h, trace_id, "down").to_body(), trace_id)
    agg.timer = world.after(aggregation_timeout(world, node), lambda: _aggregation_timeout(world, node, key))


def _answer(world: "World", node: NodeRecord, answer: Answer, h: Digest, trace_id: str,
            reply_to: Optional[PublicKey]) -> None:
    if reply_to is None:
        root_decide(world, node, answer, h, world.now, trace_id)
    else:
        world.send(node, reply_to, MsgType.CONFLICT_RESP, ConflictResponse(answer, trace_id, h).to_body(), trace_id)


def aggregate_responses(world: "World", manager: NodeRecord, responses: list, own: Answer,
                        h: Digest, trace_id: str, reply_to: Optional[PublicKey]) -> Answer:
    """
    OR the manager's own answer with its children's and pass it on.

    At the root the combined answer goes to root_decide; elsewhere it is
    sealed to the parent.
    """
    result = combine(own, responses)
    manager.audit(world.now, "aggregate", f"{fingerprint(h)} {result.value}")
    _answer(world, manager, result, h, trace_id, reply_to)
    return result


def _aggregation_timeout(world: "World", node: NodeRecord, key: tuple) -> None:
    agg = node.proto.aggregations.get(key)
    if agg is None or agg.done:
        return
    agg.done = True
    missing = len(agg.waiting)
    world.trace.add(world.now, "timeout", node.name, "", MsgType.CONFLICT_RESP.value, agg.trace_id,
                    f"missing={missing}")
    logging.warning(f"{node.name} timed out waiting for {missing} conflict response(s); failing closed")
    responses = list(agg.answers.values()) + [Answer.YES] * missing
    aggregate_responses(world, node, responses, agg.own, agg.h, agg.trace_id, agg.reply_to)


def root_decide(world: "World", root: NodeRecord, aggregate: Answer, h: Digest, t: int,
                trace_id: str) -> DecisionRecord:
    """
    Phase II step 5: REJECT iff any subtree reported a conflict.

    The root also keeps digests it approved while their joins are still in
    flight, so a concurrent join of the same key is rejected.
    """
    root.proto.inflight = {d: until for d, until in root.proto.inflight.items() if until > world.now}
    if aggregate == Answer.YES:
        decision, reason = Verdict.REJECT, "Conflict"
    elif h in root.proto.inflight:
        decision, reason = Verdict.REJECT, "Conflict"
    else:
        decision, reason = Verdict.APPROVE, ""
        root.proto.inflight[h] = world.now + _pending_expiry(world, root)

    record = DecisionRecord.create(world.provider, root, h, decision, t, reason)
    root.audit(world.now, "decide", f"{fingerprint(h)} {decision.value} {reason}".strip())
    world.trace.add(world.now, "decision", root.name, "", MsgType.DECISION.value, trace_id,
                    f"{decision.value} {reason}".strip())
    logging.info(f"Root {root.name} decided {decision.value} for {fingerprint(h)}")
    disseminate_decision(world, root, record, trace_id)
    return record


def disseminate_decision(world: "World", node: NodeRecord, rec: DecisionRecord, trace_id: str) -> Optional[DecisionRecord]:
    """
    Phase III: verify, log once, re-sign for every live child, then run
    Phase IV if this node holds the matching pending request.

    Raises:
        SignatureInvalid: record not signed by this node's parent
        ReplayRejected: a decision for this run was already logged here
    """
    provider = world.provider
    if rec.signer_digest != node.node_id:
        if node.parent is None or not rec.verify(provider, node.parent):
            raise SignatureInvalid(f"decision at {node.name} is not signed by its parent")
    key = (trace_id, rec.h)
    if key in node.proto.decisions:
        raise ReplayRejected(f"{node.name} already logged the decision for {fingerprint(rec.h)}")
    node.proto.decisions[key] = rec
    node.audit(world.now, "decision", f"{fingerprint(rec.h)} {rec.decision.value}")

    # re-signed with this hop's clock
    own = rec if rec.signer_digest == node.node_id else DecisionRecord.create(
        provider, node, rec.h, rec.decision, world.now, rec.reason)
    children = [pk for pk in node.children if provider.hash(pk) not in node.revocations]
    for child_pk in children:
        world.send(node, child_pk, MsgType.DECISION, {"record": own.to_wire()}, trace_id)

    pending = next((p for (h, _), p in node.proto.pending_joins.items()
                    if h == rec.h and p.trace_id == trace_id), None)
    if pending is not None:
        try:
            finalize_join(world, node, rec, pending)
        except PvtnError as e:
            world.reject(node.name, node.name, MsgType.DECISION.value, trace_id, e)
    return own


def _revoked_since(world: "World", manager: NodeRecord, h: Digest, since: int) -> bool:
    return any(r.node_id == h and r.revoked and (r.revoked_at or 0) >= since
               for r in world.members(manager.tenant))


def finalize_join(world: "World", manager: NodeRecord, rec: DecisionRecord,
                  pending: PendingJoin) -> Optional[DelegationCertificate]:
    """
    Phase IV at the initiating manager.

    Returns:
        DelegationCertificate or None: the issued certificate, None on REJECT

    Raises:
        DecisionMismatch: the decision answers a different key
        StaleDecision: the decision timestamp is outside the skew window
        ConflictDetected: the key was revoked while the join was running
        ReplayRejected: a certificate was already issued for this nonce
    """
    provider = world.provider
    req = pending.request
    h = provider.hash(req.candidate_pk)
    if rec.h != h:
        raise DecisionMismatch(f"decision for {fingerprint(rec.h)} does not match pending {fingerprint(h)}")
    if abs(world.now - rec.t) > world.settings.decision_skew:
        raise StaleDecision(f"decision time {rec.t} is outside the window at {world.now}")
    manager.proto.pending_joins.pop((h, req.nonce), None)
    outcome = world.outcome(pending.trace_id, "join", _name_of(world, req.candidate_pk))
    outcome.detail["decision"] = rec.decision.value

    try:
        if rec.decision == Verdict.APPROVE and _revoked_since(world, manager, h, pending.started):
            world.send(manager, req.candidate_pk, MsgType.JOIN_REJECT,
                       {"reason": "Revoked", "nonce": req.nonce}, pending.trace_id)
            raise ConflictDetected(f"key {fingerprint(h)} was revoked during its join")

        if rec.decision == Verdict.REJECT:
            world.send(manager, req.candidate_pk, MsgType.JOIN_REJECT,
                       {"reason": rec.reason, "nonce": req.nonce}, pending.trace_id)
            manager.audit(world.now, "join_reject", f"{fingerprint(h)} {rec.reason}")
            return None

        issued_key = (manager.tenant, req.nonce)
        if issued_key in world.issued_nonces:
            raise ReplayRejected(f"a certificate was already issued for this nonce")
        cert = issue_delegation(provider, manager, req.candidate_pk, Role.LEAF, manager.scope(),
                                world.validity(), req.nonce)
        world.issued_nonces.add(issued_key)
        world.record_issue("delegation", manager, h, req.nonce)

        tenant = world.tenant_of(manager)
        full_path = tenant is not None and tenant.mode == DelegationMode.FULL_PATH
        gateway_pk = world.node(tenant.gateway).public if tenant is not None and tenant.gateway else b""
        body = {
            "cert": cert.to_wire(),
            "tenant": manager.tenant,
            "full_path": full_path,
            "chain": [c.to_wire() for c in (manager.cert_chain or [])] if full_path else [],
            "gateway": gateway_pk,
        }
        world.send(manager, req.candidate_pk, MsgType.JOIN_CERT, body, pending.trace_id)
        manager.audit(world.now, "join_issue", fingerprint(h))
        logging.info(f"{manager.name} admitted {fingerprint(h)}")
        return cert
    finally:
        manager.pending_peers.discard(req.candidate_pk)


def _expire_pending(world: "World", manager: NodeRecord, key: tuple) -> None:
    pending = manager.proto.pending_joins.pop(key, None)
    if pending is None:
        return
    world.trace.add(world.now, "timeout", manager.name, "", MsgType.JOIN_REQ.value, pending.trace_id, "expired")
    try:
        world.send(manager, pending.request.candidate_pk, MsgType.JOIN_REJECT,
                   {"reason": "Timeout", "nonce": pending.request.nonce}, pending.trace_id)
    finally:
        manager.pending_peers.discard(pending.request.candidate_pk)


# Message handlers

def _on_join_request(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    req = JoinRequest.from_body(payload.body)
    if req.nonce != payload.nonce:
        raise DecisionMismatch("join request nonce does not match its envelope")
    handle_join_request(world, node, req, payload.trace_id)


def _child_digests(world: "World", node: NodeRecord) -> set:
    return {world.provider.hash(pk) for pk in node.children}


def _on_hash_probe(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    h = bytes(payload.body["h"])
    direction = payload.body["direction"]
    key = (payload.trace_id, h, direction)
    if direction == "up":
        if payload.sender_digest not in _child_digests(world, node):
            raise NotAuthorized(f"upward probe at {node.name} from a non-child")
    elif node.parent is None or world.provider.hash(node.parent) != payload.sender_digest:
        raise NotAuthorized(f"downward probe at {node.name} not from its parent")
    if key in node.proto.seen_probes:
        world.flag_invariant(f"{node.name} received probe {fingerprint(h)} twice")
        raise ReplayRejected(f"probe already handled by {node.name}")
    node.proto.seen_probes.add(key)

    if direction == "up":
        if node.role == Role.ROOT:
            start_conflict_check(world, node, h, payload.trace_id)
        else:
            world.send(node, node.parent, MsgType.HASH_PROBE, payload.body, payload.trace_id)
    else:
        _local_round(world, node, h, payload.trace_id, reply_to=node.parent)


def _on_conflict_response(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    h = bytes(payload.body["h"])
    agg = node.proto.aggregations.get((payload.trace_id, h))
    if agg is None:
        raise NotAuthorized(f"{node.name} has no aggregation for this response")
    if agg.done:
        node.audit(world.now, "late_response", fingerprint(h))
        return
    if payload.sender_digest not in agg.waiting:
        raise NotAuthorized(f"unexpected conflict response at {node.name}")
    answer = Answer(payload.body["answer"])
    agg.waiting.discard(payload.sender_digest)
    agg.answers[payload.sender_digest] = answer
    if answer == Answer.YES or not agg.waiting:
        agg.done = True
        if agg.timer is not None:
            agg.timer.cancelled = True
        aggregate_responses(world, node, list(agg.answers.values()), agg.own, h, agg.trace_id, agg.reply_to)


def _on_decision(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    rec = DecisionRecord.from_wire(payload.body["record"])
    disseminate_decision(world, node, rec, payload.trace_id)


def _candidate_state(node: NodeRecord, trace_id: str) -> CandidateState:
    state = node.proto.candidate
    if state is None or state.trace_id != trace_id:
        raise DecisionMismatch(f"{node.name} has no pending join for this run")
    return state


def _on_join_cert(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    state = _candidate_state(node, payload.trace_id)
    if payload.signer_pk != state.manager_pk:
        raise SignatureInvalid("join certificate not sent by the contacted manager")
    cert = DelegationCertificate.from_wire(payload.body["cert"])
    if cert.subject_pk != node.public or cert.nonce != state.nonce:
        raise DecisionMismatch("certificate does not answer this join request")
    if not cert.verify(world.provider, state.manager_pk):
        raise SignatureInvalid("certificate signature does not verify under the manager key")
    if not cert.validity.contains(world.now):
        raise StaleDecision("certificate is not valid now")

    prefix = None
    if payload.body.get("full_path"):
        prefix = [DelegationCertificate.from_wire(c) for c in payload.body["chain"]]
    attach_child(node, state.manager_pk, bytes(payload.body["tenant"]), cert, prefix)
    node.gateway_pk = bytes(payload.body["gateway"]) or None
    state.status = "approved"
    node.audit(world.now, "joined", fingerprint(payload.sender_digest))
    outcome = world.outcome(payload.trace_id, "join", node.name)
    outcome.status = "approved"
    world.trace.add(world.now, "joined", node.name, "", MsgType.JOIN_CERT.value, payload.trace_id)
    logging.info(f"{node.name} joined under {fingerprint(payload.sender_digest)}")


def _on_join_reject(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    state = _candidate_state(node, payload.trace_id)
    if payload.signer_pk != state.manager_pk:
        raise SignatureInvalid("rejection not sent by the contacted manager")
    if bytes(payload.body["nonce"]) != state.nonce:
        raise DecisionMismatch("rejection does not answer this join request")
    state.status = "rejected"
    state.reason = str(payload.body["reason"])
    node.proto.rejections.append((payload.trace_id, state.reason))
    node.audit(world.now, "join_rejected", state.reason)
    outcome = world.outcome(payload.trace_id, "join", node.name)
    outcome.status = "rejected"
    outcome.reason = state.reason
    logging.info(f"{node.name} join rejected: {state.reason}")


def install(world: "World") -> None:
    world.on(MsgType.JOIN_REQ, _on_join_request, signed=False)
    world.on(MsgType.HASH_PROBE, _on_hash_probe)
    world.on(MsgType.CONFLICT_RESP, _on_conflict_response)
    world.on(MsgType.DECISION, _on_decision)
    world.on(MsgType.JOIN_CERT, _on_join_cert)
    world.on(MsgType.JOIN_REJECT, _on_join_reject)
