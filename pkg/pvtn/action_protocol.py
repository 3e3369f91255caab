"""
Action Protocol Module for PVTN

Action certificates with hierarchical endorsement:
- a member asks only its direct parent P0 for a scoped action certificate
- P0 checks the scope against its own delegation and signs a proposal C_0
- every layer from P1 to the root checks the issuer below, endorses it
  (E_k = {Role, T, Nonce}) and may deny on policy
- the decision comes back down unchanged; P0 finalizes Cert_N = (C_0, {E})

Validation through a gateway: a validator X holding only the gateway key
sends (Action, Cert_N) to the gateway; each layer's checks are in
verify_layer, the message flow lives in the gateway module. X accepts or
refuses after checking the gateway's signature once.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

from pvtn.codec import encode
from pvtn.crypto import CryptoProvider, Digest, PublicKey, Signature, fingerprint
from pvtn.errors import (
    DecisionMismatch,
    NoParent,
    NotAManager,
    NotAuthorized,
    ScopeExceeded,
    SignatureInvalid,
)
from pvtn.messaging import ControlPayload, Envelope, MsgType, sign_fields, verify_fields
from pvtn.tree import NodeRecord, Role, Validity, scope_contains

if TYPE_CHECKING:
    from pvtn.world import World


class ActionVerdict(str, Enum):
    APPROVE = "Approve"
    DENY = "Deny"


@dataclass(frozen=True)
class ActionCertProposal:
    """C_0 = {H(ID_N), Scope, T, Nonce} signed by the direct parent."""

    subject_hash: Digest
    scope: str
    t: int
    nonce: bytes
    signer_digest: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"subject": self.subject_hash, "scope": self.scope, "t": self.t, "nonce": self.nonce}

    def signed_by(self, provider: CryptoProvider, signer: NodeRecord) -> "ActionCertProposal":
        return ActionCertProposal(self.subject_hash, self.scope, self.t, self.nonce, signer.node_id,
                                  sign_fields(provider, signer, self.body()))

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "ActionCertProposal":
        return cls(bytes(data["subject"]), str(data["scope"]), int(data["t"]), bytes(data["nonce"]),
                   bytes(data["signer"]), Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class Endorsement:
    """E_k = {Role of the issuer below, T, Nonce} signed by layer k."""

    endorsed_role: Role
    t: int
    nonce: bytes
    signer_digest: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"role": self.endorsed_role.value, "t": self.t, "nonce": self.nonce}

    @classmethod
    def create(cls, provider: CryptoProvider, signer: NodeRecord, role: Role, t: int, nonce: bytes) -> "Endorsement":
        draft = cls(role, t, nonce, signer.node_id)
        return cls(role, t, nonce, signer.node_id, sign_fields(provider, signer, draft.body()))

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "Endorsement":
        return cls(Role(data["role"]), int(data["t"]), bytes(data["nonce"]), bytes(data["signer"]),
                   Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class ActionDecision:
    subject_hash: Digest
    nonce: bytes
    verdict: ActionVerdict
    reason: str
    decided_by: Digest
    t: int
    endorsements: tuple
    signer_digest: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"subject": self.subject_hash, "nonce": self.nonce, "verdict": self.verdict.value,
                "reason": self.reason, "by": self.decided_by, "t": self.t,
                "endorsements": [e.to_wire() for e in self.endorsements]}

    def signed_by(self, provider: CryptoProvider, signer: NodeRecord) -> "ActionDecision":
        draft = ActionDecision(self.subject_hash, self.nonce, self.verdict, self.reason, self.decided_by,
                               self.t, self.endorsements, signer.node_id)
        return ActionDecision(draft.subject_hash, draft.nonce, draft.verdict, draft.reason, draft.decided_by,
                              draft.t, draft.endorsements, signer.node_id,
                              sign_fields(provider, signer, draft.body()))

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "ActionDecision":
        return cls(bytes(data["subject"]), bytes(data["nonce"]), ActionVerdict(data["verdict"]),
                   str(data["reason"]), bytes(data["by"]), int(data["t"]),
                   tuple(Endorsement.from_wire(e) for e in data["endorsements"]),
                   bytes(data["signer"]), Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class ActionCertificate:
    """Cert_N = (C_0, {E_1, E_2, ...}) finalized by P0."""

    proposal: ActionCertProposal
    endorsements: tuple
    issuer_digest: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"proposal": self.proposal.to_wire(), "endorsements": [e.to_wire() for e in self.endorsements]}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.issuer_digest, self.body(), self.signature)

    def digest(self, provider: CryptoProvider) -> Digest:
        return provider.hash(encode(self.to_wire()))

    def to_wire(self) -> dict:
        return {**self.body(), "issuer": self.issuer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "ActionCertificate":
        return cls(ActionCertProposal.from_wire(data["proposal"]),
                   tuple(Endorsement.from_wire(e) for e in data["endorsements"]),
                   bytes(data["issuer"]), Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class GatewayProof:
    """
    The gateway's signed summary of a completed validation.

    delegation_proof is the digest of the approval-chain transcript, so no
    member identity travels beyond the gateway. storage_id and p0_random
    are empty for plain validator requests.
    """

    cert_hash: Digest
    delegation_proof: Digest
    storage_id: bytes
    nonce: bytes
    validity: Validity
    p0_random: bytes
    scope: str
    gateway_digest: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"cert": self.cert_hash, "proof": self.delegation_proof, "storage": self.storage_id,
                "nonce": self.nonce, "validity": self.validity.to_wire(), "random": self.p0_random,
                "scope": self.scope}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.gateway_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "gateway": self.gateway_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "GatewayProof":
        return cls(bytes(data["cert"]), bytes(data["proof"]), bytes(data["storage"]), bytes(data["nonce"]),
                   Validity.from_wire(data["validity"]), bytes(data["random"]), str(data["scope"]),
                   bytes(data["gateway"]), Signature.from_wire(data["signature"]))


@dataclass
class PendingAction:
    requester_pk: PublicKey
    proposal: ActionCertProposal
    trace_id: str


def _name_of(world: "World", pk: PublicKey) -> str:
    record = world.locate(None, world.provider.hash(pk))
    return record.name if record is not None else fingerprint(world.provider.hash(pk))


# Issuance

def request_action_cert(world: "World", n: NodeRecord, scope: str) -> str:
    """
    Ask the direct parent for an action certificate.

    Raises:
        NoParent: n is a root
    """
    if n.parent is None:
        raise NoParent(f"{n.name} has no parent to issue action certificates")
    trace_id = world.new_trace_id()
    world.outcome(trace_id, "action", n.name)
    world.send(n, n.parent, MsgType.ACTION_CERT_REQ, {"scope": scope}, trace_id)
    n.audit(world.now, "action_request", scope)
    return trace_id


def parent_propose(world: "World", p0: NodeRecord, requester_pk: PublicKey, scope: str,
                   trace_id: str) -> ActionCertProposal:
    """
    P0 signs a proposal and seals it to P1, or rejects it locally.

    Raises:
        NotAManager: p0 is a leaf
        NotAuthorized: the requester is not a child of p0
        ScopeExceeded: the scope is outside p0's own delegation
    """
    provider = world.provider
    if not p0.can_issue():
        raise NotAManager(f"{p0.name} cannot issue action certificates")
    if requester_pk not in p0.children:
        raise NotAuthorized(f"requester is not a child of {p0.name}")
    if not scope_contains(p0.scope(), scope):
        p0.audit(world.now, "action_reject", f"ScopeExceeded {scope}")
        raise ScopeExceeded(f"{scope} is outside the delegation of {p0.name}")

    draft = ActionCertProposal(provider.hash(requester_pk), scope, world.now,
                               provider.new_nonce(world.rng), p0.node_id)
    proposal = draft.signed_by(provider, p0)
    p0.proto.pending_actions[(proposal.subject_hash, proposal.nonce)] = PendingAction(requester_pk, proposal, trace_id)
    p0.audit(world.now, "action_propose", f"{fingerprint(proposal.subject_hash)} {scope}")

    if p0.role == Role.ROOT:
        policy_decide(world, p0, proposal, (), trace_id)
    else:
        world.send(p0, p0.parent, MsgType.ENDORSEMENT,
                   {"proposal": proposal.to_wire(), "endorsements": []}, trace_id)
    return proposal


def endorse(world: "World", layer: NodeRecord, child_pk: PublicKey, proposal: ActionCertProposal,
            endorsements: tuple) -> tuple:
    """
    Check the issuer below and endorse it.

    Returns:
        tuple: (Endorsement or None, deny reason or "")
    """
    provider = world.provider
    child_digest = provider.hash(child_pk)
    if child_digest in layer.revocations:
        return None, "IssuerRevoked"
    role = layer.children.get(child_pk)
    if role is None:
        return None, "NotAuthorized"
    if role == Role.LEAF:
        return None, "RoleViolation"
    if not endorsements:
        if not proposal.verify(provider, child_pk):
            return None, "SignatureInvalid"
        issued = layer.issued.get(child_digest)
        if issued is None or not issued.validity.contains(world.now):
            return None, "IssuerRevoked"
    else:
        last = endorsements[-1]
        if not last.verify(provider, child_pk) or last.nonce != proposal.nonce:
            return None, "SignatureInvalid"
    endorsement = Endorsement.create(provider, layer, role, world.now, proposal.nonce)
    layer.audit(world.now, "endorse", f"{fingerprint(proposal.subject_hash)} {role.value}")
    return endorsement, ""


def policy_decide(world: "World", layer: NodeRecord, proposal: ActionCertProposal, endorsements: tuple,
                  trace_id: str, reason: str = "") -> Optional[ActionDecision]:
    """
    Deny on local policy (or an earlier failed check), approve at the root,
    otherwise forward the proposal upward.

    Returns:
        ActionDecision or None: None when the proposal was forwarded
    """
    provider = world.provider
    if not reason and world.policy_for(layer).denies(proposal.scope):
        reason = "Policy"
    if reason:
        verdict = ActionVerdict.DENY
    elif layer.role == Role.ROOT:
        verdict = ActionVerdict.APPROVE
    else:
        world.send(layer, layer.parent, MsgType.ENDORSEMENT,
                   {"proposal": proposal.to_wire(), "endorsements": [e.to_wire() for e in endorsements]},
                   trace_id)
        return None

    decision = ActionDecision(proposal.subject_hash, proposal.nonce, verdict, reason, layer.node_id, world.now,
                              tuple(endorsements) if verdict == ActionVerdict.APPROVE else (),
                              layer.node_id).signed_by(provider, layer)
    layer.audit(world.now, "action_decide", f"{verdict.value} {reason}".strip())
    world.trace.add(world.now, "decision", layer.name, "", MsgType.ACTION_DECISION.value, trace_id,
                    f"{verdict.value} {reason}".strip())
    logging.info(f"{layer.name} decided {verdict.value} for action {fingerprint(proposal.subject_hash)}")
    forward_decision(world, layer, decision, trace_id)
    return decision


def forward_decision(world: "World", node: NodeRecord, decision: ActionDecision, trace_id: str) -> None:
    """Intermediate layers record the decision and pass it on unchanged."""
    key = (decision.subject_hash, decision.nonce)
    if key in node.proto.pending_actions:
        finalize_action_cert(world, node, decision)
        return
    child_pk = node.proto.action_routes.pop(key, None)
    if child_pk is None:
        raise DecisionMismatch(f"{node.name} has no route for action {fingerprint(decision.subject_hash)}")
    own = decision if decision.signer_digest == node.node_id else decision.signed_by(world.provider, node)
    world.send(node, child_pk, MsgType.ACTION_DECISION, {"decision": own.to_wire()}, trace_id)


def finalize_action_cert(world: "World", p0: NodeRecord, decision: ActionDecision) -> Optional[ActionCertificate]:
    """
    P0 assembles and delivers Cert_N, or aborts on Deny.

    Raises:
        DecisionMismatch: no pending proposal with the decision's (subject, nonce)
    """
    provider = world.provider
    pending = p0.proto.pending_actions.pop((decision.subject_hash, decision.nonce), None)
    if pending is None:
        raise DecisionMismatch(f"{p0.name} has no pending action for this decision")
    outcome = world.outcome(pending.trace_id, "action", _name_of(world, pending.requester_pk))
    if decision.verdict != ActionVerdict.APPROVE:
        outcome.status = "denied"
        outcome.reason = decision.reason
        p0.audit(world.now, "action_abort", decision.reason)
        return None

    draft = ActionCertificate(pending.proposal, tuple(decision.endorsements), p0.node_id)
    cert = ActionCertificate(draft.proposal, draft.endorsements, p0.node_id,
                             sign_fields(provider, p0, draft.body()))
    world.record_issue("action", p0, pending.proposal.subject_hash, pending.proposal.nonce)
    world.send(p0, pending.requester_pk, MsgType.ACTION_CERT, {"cert": cert.to_wire()}, pending.trace_id)
    p0.audit(world.now, "action_issue", fingerprint(pending.proposal.subject_hash))
    return cert


# Layer checks used during gateway validation

@dataclass(frozen=True)
class LayerCheck:
    ok: bool
    reason: str = ""
    next_pk: Optional[PublicKey] = None


def is_issuer(node: NodeRecord, cert: ActionCertificate) -> bool:
    return cert.proposal.signer_digest == node.node_id


def verify_layer(world: "World", node: NodeRecord, cert: ActionCertificate,
                 commitment: Optional[bytes] = None) -> LayerCheck:
    """
    Checks one layer performs while validation travels down the path.

    A layer verifies only endorsements signed by keys it holds: its own,
    its parent's (the one above) and its child's (the one below). The
    grandparent of N also checks that P0 is a legitimate, active manager
    that did not certify itself; P0 checks its own signature, the
    subject, freshness and scope.
    """
    provider = world.provider
    proposal = cert.proposal
    signers = [e.signer_digest for e in cert.endorsements]
    if is_issuer(node, cert):
        return _verify_issuer(world, node, cert, commitment)

    if node.node_id not in signers:
        return LayerCheck(False, "NotOnPath")
    index = signers.index(node.node_id)
    own = cert.endorsements[index]
    if not own.verify(provider, node.public) or own.nonce != proposal.nonce:
        return LayerCheck(False, "SignatureInvalid")
    if index + 1 < len(signers):
        if node.parent is None or not cert.endorsements[index + 1].verify(provider, node.parent):
            return LayerCheck(False, "BrokenChain")
    elif node.role != Role.ROOT:
        return LayerCheck(False, "BrokenChain")

    below = signers[index - 1] if index > 0 else proposal.signer_digest
    child_pk = next((pk for pk in node.children if provider.hash(pk) == below), None)
    if child_pk is None:
        return LayerCheck(False, "BrokenChain")
    if below in node.revocations:
        return LayerCheck(False, "IssuerRevoked")
    if index > 0:
        if not cert.endorsements[index - 1].verify(provider, child_pk):
            return LayerCheck(False, "BrokenChain")
        return LayerCheck(True, "", child_pk)

    # grandparent of N: P0 must be an active manager that did not certify itself
    if proposal.subject_hash == proposal.signer_digest:
        return LayerCheck(False, "SelfIssued")
    if node.children.get(child_pk) == Role.LEAF or own.endorsed_role == Role.LEAF:
        return LayerCheck(False, "RoleViolation")
    issued = node.issued.get(below)
    if issued is None or not issued.validity.contains(world.now):
        return LayerCheck(False, "IssuerRevoked")
    if not proposal.verify(provider, child_pk):
        return LayerCheck(False, "SignatureInvalid")
    return LayerCheck(True, "", child_pk)


def _verify_issuer(world: "World", p0: NodeRecord, cert: ActionCertificate,
                   commitment: Optional[bytes]) -> LayerCheck:
    provider = world.provider
    proposal = cert.proposal
    if proposal.subject_hash == p0.node_id:
        return LayerCheck(False, "SelfIssued")
    if not cert.verify(provider, p0.public) or not proposal.verify(provider, p0.public):
        return LayerCheck(False, "SignatureInvalid")
    if cert.endorsements and (p0.parent is None or not cert.endorsements[0].verify(provider, p0.parent)):
        return LayerCheck(False, "BrokenChain")
    subject_pk = next((pk for pk in p0.children if provider.hash(pk) == proposal.subject_hash), None)
    if subject_pk is None or proposal.subject_hash in p0.revocations:
        return LayerCheck(False, "NotAuthorized")
    if world.now - proposal.t > world.settings.action_ttl or world.now < proposal.t:
        return LayerCheck(False, "Expired")
    if not scope_contains(p0.scope(), proposal.scope):
        return LayerCheck(False, "ScopeExceeded")
    if commitment is not None and commitment != commit(provider, proposal):
        return LayerCheck(False, "CommitmentMismatch")
    return LayerCheck(True, "", subject_pk)


def commit(provider: CryptoProvider, proposal: ActionCertProposal) -> Digest:
    """Hiding commitment to the subject: H(H(ID_N) || Nonce)."""
    return provider.hash(proposal.subject_hash + proposal.nonce)


# Validator side

def validate_action(world: "World", x: NodeRecord, action: str, cert: ActionCertificate,
                    gateway_pk: PublicKey) -> str:
    """
    X forwards (Action, Cert_N) to the gateway; X needs only the gateway key.

    Returns:
        str: trace id; the verdict lands in world.outcome(trace_id)

    Raises:
        KeyNotVisible: x does not hold the gateway key
    """
    trace_id = world.new_trace_id()
    outcome = world.outcome(trace_id, "validate", x.name)
    outcome.detail["action"] = action
    outcome.detail["cert"] = cert.digest(world.provider)
    x.proto.validations[trace_id] = (action, cert, gateway_pk)
    body = {"action": action, "cert": cert.to_wire(), "reply": x.public}
    world.send(x, gateway_pk, MsgType.VALIDATION_REQ, body, trace_id, signed=False)
    x.audit(world.now, "validate_request", action)
    return trace_id


def _verification(world: "World", x: NodeRecord, trace_id: str, ok: bool) -> None:
    x.verifications += 1
    world.trace.add(world.now, "verify", x.name, "", MsgType.GATEWAY_PROOF.value, trace_id,
                    "ok" if ok else "bad")


def accept_proof(world: "World", x: NodeRecord, proof: GatewayProof, trace_id: str) -> bool:
    """X checks the gateway signature, freshness, certificate binding and scope."""
    request = x.proto.validations.pop(trace_id, None)
    if request is None:
        raise DecisionMismatch(f"{x.name} did not request this validation")
    action, cert, gateway_pk = request
    signed = proof.verify(world.provider, gateway_pk)
    _verification(world, x, trace_id, signed)
    outcome = world.outcome(trace_id, "validate", x.name)
    reason = ""
    if not signed:
        reason = "SignatureInvalid"
    elif not proof.validity.contains(world.now):
        reason = "Expired"
    elif proof.cert_hash != cert.digest(world.provider) or proof.nonce != cert.proposal.nonce:
        reason = "DecisionMismatch"
    elif not scope_contains(proof.scope, action):
        reason = "ScopeExceeded"
    outcome.status = "deny" if reason else "permit"
    outcome.reason = reason
    world.trace.add(world.now, "verdict", x.name, "", MsgType.GATEWAY_PROOF.value, trace_id,
                    outcome.status + (f" {reason}" if reason else ""))
    logging.info(f"{x.name} validation {outcome.status} {reason}".strip())
    return not reason


# Message handlers

def _on_action_request(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    parent_propose(world, node, payload.signer_pk, str(payload.body["scope"]), payload.trace_id)


def _on_endorsement(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    proposal = ActionCertProposal.from_wire(payload.body["proposal"])
    endorsements = tuple(Endorsement.from_wire(e) for e in payload.body["endorsements"])
    key = (proposal.subject_hash, proposal.nonce)
    if key in node.proto.action_routes:
        raise DecisionMismatch(f"{node.name} already routes this proposal")
    node.proto.action_routes[key] = payload.signer_pk
    node.audit(world.now, "proposal_received", fingerprint(proposal.subject_hash))

    endorsement, reason = endorse(world, node, payload.signer_pk, proposal, endorsements)
    world.trace.add(world.now, "policy", node.name, "", MsgType.ENDORSEMENT.value, payload.trace_id,
                    f"Deny {reason}" if reason else "Endorse")
    if endorsement is not None:
        endorsements = endorsements + (endorsement,)
    policy_decide(world, node, proposal, endorsements, payload.trace_id, reason)


def _on_action_decision(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    decision = ActionDecision.from_wire(payload.body["decision"])
    if node.parent is None or payload.signer_pk != node.parent or not decision.verify(world.provider, node.parent):
        raise SignatureInvalid(f"action decision at {node.name} is not signed by its parent")
    node.audit(world.now, "action_decision", f"{decision.verdict.value} {decision.reason}".strip())
    forward_decision(world, node, decision, payload.trace_id)


def _on_action_cert(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    cert = ActionCertificate.from_wire(payload.body["cert"])
    if node.parent is None or payload.signer_pk != node.parent or not cert.verify(world.provider, node.parent):
        raise SignatureInvalid("action certificate not issued by the direct parent")
    if cert.proposal.subject_hash != node.node_id:
        raise DecisionMismatch("action certificate names another member")
    node.proto.action_certs.append(cert)
    node.audit(world.now, "action_cert", cert.proposal.scope)
    outcome = world.outcome(payload.trace_id, "action", node.name)
    outcome.status = "approved"
    outcome.detail["nonce"] = cert.proposal.nonce.hex()
    world.trace.add(world.now, "certified", node.name, "", MsgType.ACTION_CERT.value, payload.trace_id,
                    f"endorsements={len(cert.endorsements)}")


def _on_gateway_proof(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    accept_proof(world, node, GatewayProof.from_wire(payload.body["proof"]), payload.trace_id)


def _on_access_result(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    """A gateway denial: one signature check, then the validation is refused."""
    request = node.proto.validations.pop(payload.trace_id, None)
    if request is None:
        raise DecisionMismatch(f"{node.name} did not request this validation")
    gateway_pk = request[2]
    fields = {"permit": bool(payload.body["permit"]), "reason": str(payload.body["reason"]),
              "layer": bytes(payload.body["layer"]), "trace": payload.trace_id}
    signed = verify_fields(world.provider, gateway_pk, world.provider.hash(gateway_pk), fields,
                           Signature.from_wire(payload.body["signature"]))
    _verification(world, node, payload.trace_id, signed)
    outcome = world.outcome(payload.trace_id, "validate", node.name)
    outcome.status = "deny"
    outcome.reason = fields["reason"] if signed else "SignatureInvalid"
    outcome.detail["layer"] = fields["layer"].hex()[:16]
    world.trace.add(world.now, "verdict", node.name, "", MsgType.ACCESS_RESULT.value, payload.trace_id,
                    f"deny {outcome.reason}")


def install(world: "World") -> None:
    world.on(MsgType.ACTION_CERT_REQ, _on_action_request)
    world.on(MsgType.ENDORSEMENT, _on_endorsement, accept_revoked=True)
    world.on(MsgType.ACTION_DECISION, _on_action_decision)
    world.on(MsgType.ACTION_CERT, _on_action_cert)
    world.on(MsgType.GATEWAY_PROOF, _on_gateway_proof, signed=False)
    world.on(MsgType.ACCESS_RESULT, _on_access_result, signed=False)
