"""
Upgrade Protocol Module for PVTN

Hierarchical leaf upgrade:
- Step 0: the leaf may hint its parent P0 (informational only)
- Step 1: P0 signs Req = {LeafHash, DesiredRole, T, Nonce} plus a manager
  attestation and seals it to P1
- Step 2-3: every layer verifies its direct child, applies local policy
  (depth, subtree size, quota) and appends a signed policy flag
- Step 4: the root applies global policy and decides
- Deny at any layer travels back down only; nothing goes further up
- Step 5: P0 alone issues Cert_L and the new delegation certificate
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

from pvtn.crypto import CryptoProvider, Digest, PublicKey, Signature, fingerprint
from pvtn.errors import DecisionMismatch, NotAManager, NotAuthorized, SignatureInvalid
from pvtn.messaging import ControlPayload, Envelope, MsgType, sign_fields, verify_fields
from pvtn.tree import (
    DelegationCertificate,
    DelegationMode,
    NodeRecord,
    Role,
    issue_delegation,
    promote_record,
)

if TYPE_CHECKING:
    from pvtn.world import World


class FlagVerdict(str, Enum):
    APPROVE = "Approve"
    DENY = "Deny"


class DenyReason(str, Enum):
    NONE = ""
    DEPTH_LIMIT = "DepthLimit"
    SIZE_QUOTA = "SizeQuota"
    ROLE_VIOLATION = "RoleViolation"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class UpgradeRequest:
    leaf_hash: Digest
    desired_role: Role
    t: int
    nonce: bytes
    signer_digest: Digest
    signature: Signature

    def body(self) -> dict:
        return {"leaf": self.leaf_hash, "role": self.desired_role.value, "t": self.t, "nonce": self.nonce}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "UpgradeRequest":
        return cls(bytes(data["leaf"]), Role(data["role"]), int(data["t"]), bytes(data["nonce"]),
                   bytes(data["signer"]), Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class ManagerAttestation:
    """
    P0's signed statement that it holds an issuing role and is the leaf's parent.

    cert_digest is the hash of P0's own delegation certificate, which P1
    issued and can therefore check against its records.
    """

    signer_digest: Digest
    cert_digest: Digest
    leaf_hash: Digest
    nonce: bytes
    signature: Signature

    def body(self) -> dict:
        return {"statement": "manager-parent-of", "cert": self.cert_digest,
                "leaf": self.leaf_hash, "nonce": self.nonce}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "ManagerAttestation":
        return cls(bytes(data["signer"]), bytes(data["cert"]), bytes(data["leaf"]), bytes(data["nonce"]),
                   Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class PolicyFlag:
    layer_digest: Digest
    verdict: FlagVerdict
    reason: DenyReason
    leaf_hash: Digest
    nonce: bytes
    signature: Signature

    def body(self) -> dict:
        return {"layer": self.layer_digest, "verdict": self.verdict.value, "reason": self.reason.value,
                "leaf": self.leaf_hash, "nonce": self.nonce}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.layer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "PolicyFlag":
        return cls(bytes(data["layer"]), FlagVerdict(data["verdict"]), DenyReason(data["reason"]),
                   bytes(data["leaf"]), bytes(data["nonce"]), Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class UpgradeDecision:
    """Final verdict, re-signed by each node on the way down."""

    leaf_hash: Digest
    nonce: bytes
    verdict: FlagVerdict
    reason: DenyReason
    decided_by: Digest
    t: int
    signer_digest: Digest
    signature: Signature

    def body(self) -> dict:
        return {"leaf": self.leaf_hash, "nonce": self.nonce, "verdict": self.verdict.value,
                "reason": self.reason.value, "by": self.decided_by, "t": self.t}

    @classmethod
    def create(cls, provider: CryptoProvider, signer: NodeRecord, leaf_hash: Digest, nonce: bytes,
               verdict: FlagVerdict, reason: DenyReason, decided_by: Digest, t: int) -> "UpgradeDecision":
        draft = cls(leaf_hash, nonce, verdict, reason, decided_by, t, signer.node_id, None)
        return cls(leaf_hash, nonce, verdict, reason, decided_by, t, signer.node_id,
                   sign_fields(provider, signer, draft.body()))

    def resigned(self, provider: CryptoProvider, signer: NodeRecord) -> "UpgradeDecision":
        return UpgradeDecision.create(provider, signer, self.leaf_hash, self.nonce, self.verdict,
                                      self.reason, self.decided_by, self.t)

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.signer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signer": self.signer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "UpgradeDecision":
        return cls(bytes(data["leaf"]), bytes(data["nonce"]), FlagVerdict(data["verdict"]),
                   DenyReason(data["reason"]), bytes(data["by"]), int(data["t"]), bytes(data["signer"]),
                   Signature.from_wire(data["signature"]))


@dataclass(frozen=True)
class UpgradeCertificate:
    leaf_hash: Digest
    new_role: Role
    t: int
    nonce: bytes
    issuer_digest: Digest
    signature: Signature

    def body(self) -> dict:
        return {"leaf": self.leaf_hash, "role": self.new_role.value, "t": self.t, "nonce": self.nonce}

    def verify(self, provider: CryptoProvider, pk: PublicKey) -> bool:
        return verify_fields(provider, pk, self.issuer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "issuer": self.issuer_digest, "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "UpgradeCertificate":
        return cls(bytes(data["leaf"]), Role(data["role"]), int(data["t"]), bytes(data["nonce"]),
                   bytes(data["issuer"]), Signature.from_wire(data["signature"]))


@dataclass
class PendingUpgrade:
    leaf_pk: PublicKey
    request: UpgradeRequest
    trace_id: str


def _cert_digest(provider: CryptoProvider, node: NodeRecord) -> Digest:
    if node.role == Role.ROOT:
        return node.tenant
    return provider.hash(node.cert.signed_bytes())


def _leaf_name(world: "World", leaf_pk: PublicKey) -> str:
    record = world.locate(None, world.provider.hash(leaf_pk))
    return record.name if record is not None else fingerprint(world.provider.hash(leaf_pk))


def leaf_request_upgrade(world: "World", leaf: NodeRecord, desired: Role = Role.MANAGER) -> Optional[str]:
    """
    Step 0: ask the parent for an upgrade. Returns the trace id, or None
    when the caller is not a leaf.
    """
    if leaf.role != Role.LEAF:
        logging.warning(f"{leaf.name} is a {leaf.role.value}; upgrade hint ignored")
        return None
    trace_id = world.new_trace_id()
    body = {"leaf_hash": world.salted_hash(leaf.tenant, leaf.public), "desired": desired.value}
    world.send(leaf, leaf.parent, MsgType.UPGRADE_HINT, body, trace_id)
    leaf.audit(world.now, "upgrade_hint", desired.value)
    return trace_id


def parent_sign_upgrade(world: "World", p0: NodeRecord, leaf_pk: PublicKey, desired: Role = Role.MANAGER,
                        trace_id: Optional[str] = None) -> tuple:
    """
    Step 1: sign the upgrade request for a direct leaf child.

    Returns:
        tuple: (UpgradeRequest, ManagerAttestation)

    Raises:
        NotAManager: p0 is a leaf
        NotAuthorized: leaf_pk is not a leaf child of p0, or desired is Root
    """
    provider = world.provider
    if not p0.can_issue():
        raise NotAManager(f"{p0.name} is a leaf and cannot sign upgrades")
    if p0.children.get(leaf_pk) != Role.LEAF:
        raise NotAuthorized(f"{p0.name} has no leaf child with that key")
    if desired == Role.ROOT:
        raise NotAuthorized("the root role cannot be requested")

    trace_id = trace_id or world.new_trace_id()
    leaf_hash = world.salted_hash(p0.tenant, leaf_pk)
    nonce = provider.new_nonce(world.rng)
    draft = UpgradeRequest(leaf_hash, desired, world.now, nonce, p0.node_id, None)
    request = UpgradeRequest(leaf_hash, desired, world.now, nonce, p0.node_id, sign_fields(provider, p0, draft.body()))
    draft_att = ManagerAttestation(p0.node_id, _cert_digest(provider, p0), leaf_hash, nonce, None)
    attestation = ManagerAttestation(draft_att.signer_digest, draft_att.cert_digest, leaf_hash, nonce,
                                     sign_fields(provider, p0, draft_att.body()))

    p0.proto.pending_upgrades[(leaf_hash, nonce)] = PendingUpgrade(leaf_pk, request, trace_id)
    p0.audit(world.now, "upgrade_request", fingerprint(leaf_hash))
    world.outcome(trace_id, "upgrade", _leaf_name(world, leaf_pk))

    if p0.role == Role.ROOT:
        verdict, reason = _local_policy(world, p0, 1)
        if verdict == FlagVerdict.DENY:
            _deny(world, p0, request, reason, trace_id)
        else:
            root_upgrade_decide(world, p0, request, [], trace_id)
    else:
        body = {"request": request.to_wire(), "attestation": attestation.to_wire(), "flags": []}
        world.send(p0, p0.parent, MsgType.UPGRADE_REQ, body, trace_id)
    return request, attestation


def _local_policy(world: "World", layer: NodeRecord, leaf_depth: int) -> tuple:
    """Depth, size and quota checks of one layer for a leaf at leaf_depth."""
    policy = world.policy_for(layer)
    view = world.view(layer.tenant)
    if leaf_depth + 1 > policy.max_depth:
        return FlagVerdict.DENY, DenyReason.DEPTH_LIMIT
    below = view.subtree(layer)[1:]
    if len(below) > policy.max_subtree:
        return FlagVerdict.DENY, DenyReason.SIZE_QUOTA
    if policy.quota is not None and sum(1 for r in below if r.role == Role.MANAGER) + 1 > policy.quota:
        return FlagVerdict.DENY, DenyReason.CUSTOM
    return FlagVerdict.APPROVE, DenyReason.NONE


def layer_verify(world: "World", layer: NodeRecord, child_pk: PublicKey, req: UpgradeRequest,
                 attestation: ManagerAttestation, flags: list) -> tuple:
    """
    Step 2: verify the direct child that forwarded the request, then apply
    local policy.

    Returns:
        tuple: (FlagVerdict, DenyReason)
    """
    provider = world.provider
    if layer.children.get(child_pk) != Role.MANAGER:
        return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
    if req.desired_role != Role.MANAGER:
        return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
    if not flags:
        issued = layer.issued.get(provider.hash(child_pk))
        if not req.verify(provider, child_pk) or not attestation.verify(provider, child_pk):
            return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
        if issued is None or provider.hash(issued.signed_bytes()) != attestation.cert_digest:
            return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
        if attestation.leaf_hash != req.leaf_hash or attestation.nonce != req.nonce:
            return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
    else:
        last = flags[-1]
        if not last.verify(provider, child_pk) or last.verdict != FlagVerdict.APPROVE:
            return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
        if last.leaf_hash != req.leaf_hash or last.nonce != req.nonce:
            return FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
    # P0 sits one level below this layer plus one level per flag already appended
    return _local_policy(world, layer, world.depth_of(layer) + len(flags) + 2)


def _flag(world: "World", layer: NodeRecord, verdict: FlagVerdict, reason: DenyReason,
          req: UpgradeRequest) -> PolicyFlag:
    draft = PolicyFlag(layer.node_id, verdict, reason, req.leaf_hash, req.nonce, None)
    return PolicyFlag(layer.node_id, verdict, reason, req.leaf_hash, req.nonce,
                      sign_fields(world.provider, layer, draft.body()))


def _deny(world: "World", layer: NodeRecord, req: UpgradeRequest, reason: DenyReason, trace_id: str) -> UpgradeDecision:
    decision = UpgradeDecision.create(world.provider, layer, req.leaf_hash, req.nonce, FlagVerdict.DENY,
                                      reason, layer.node_id, world.now)
    layer.audit(world.now, "upgrade_deny", f"{fingerprint(req.leaf_hash)} {reason.value}")
    world.trace.add(world.now, "decision", layer.name, "", MsgType.UPGRADE_DECISION.value, trace_id,
                    f"Deny {reason.value}")
    logging.info(f"{layer.name} denied upgrade of {fingerprint(req.leaf_hash)}: {reason.value}")
    propagate_decision(world, layer, decision, trace_id)
    return decision


def root_upgrade_decide(world: "World", root: NodeRecord, req: UpgradeRequest, flags: list,
                        trace_id: str) -> UpgradeDecision:
    """
    Step 4: global policy at the root, then downward propagation.

    The global check uses the tenant-wide policy, ignoring per-node
    overrides that relaxed the layers below.
    """
    tenant = world.tenant_of(root)
    policy = tenant.policy if tenant is not None else world.policy_for(root)
    leaf_depth = len(flags) + 1 if flags else 1
    verdict, reason = FlagVerdict.APPROVE, DenyReason.NONE
    if any(flag.verdict != FlagVerdict.APPROVE for flag in flags):
        verdict, reason = FlagVerdict.DENY, DenyReason.ROLE_VIOLATION
    elif leaf_depth + 1 > policy.max_depth:
        verdict, reason = FlagVerdict.DENY, DenyReason.DEPTH_LIMIT
    if verdict == FlagVerdict.DENY:
        return _deny(world, root, req, reason, trace_id)

    decision = UpgradeDecision.create(world.provider, root, req.leaf_hash, req.nonce, verdict, reason,
                                      root.node_id, world.now)
    root.audit(world.now, "upgrade_approve", fingerprint(req.leaf_hash))
    world.trace.add(world.now, "decision", root.name, "", MsgType.UPGRADE_DECISION.value, trace_id, "Approve")
    logging.info(f"Root {root.name} approved upgrade of {fingerprint(req.leaf_hash)}")
    propagate_decision(world, root, decision, trace_id)
    return decision


def propagate_decision(world: "World", node: NodeRecord, decision: UpgradeDecision, trace_id: str) -> None:
    """Hand the decision to P0 locally or re-sign it for the child it came from."""
    key = (decision.leaf_hash, decision.nonce)
    if key in node.proto.pending_upgrades:
        issue_upgrade_cert(world, node, decision)
        return
    child_pk = node.proto.upgrade_routes.pop(key, None)
    if child_pk is None:
        raise DecisionMismatch(f"{node.name} has no route for upgrade {fingerprint(decision.leaf_hash)}")
    own = decision if decision.signer_digest == node.node_id else decision.resigned(world.provider, node)
    world.send(node, child_pk, MsgType.UPGRADE_DECISION, {"decision": own.to_wire()}, trace_id)


def issue_upgrade_cert(world: "World", p0: NodeRecord, decision: UpgradeDecision) -> Optional[UpgradeCertificate]:
    """
    Step 5: P0 issues Cert_L on approval; nothing is issued on Deny.

    Raises:
        DecisionMismatch: no pending request with the decision's (leaf hash, nonce)
    """
    provider = world.provider
    pending = p0.proto.pending_upgrades.pop((decision.leaf_hash, decision.nonce), None)
    if pending is None:
        raise DecisionMismatch(f"{p0.name} has no pending upgrade for this decision")
    outcome = world.outcome(pending.trace_id, "upgrade", _leaf_name(world, pending.leaf_pk))
    if decision.verdict != FlagVerdict.APPROVE:
        outcome.status = "denied"
        outcome.reason = decision.reason.value
        p0.audit(world.now, "upgrade_denied", decision.reason.value)
        return None

    leaf_digest = provider.hash(pending.leaf_pk)
    p0.proto.upgrade_approvals.add(pending.leaf_pk)
    draft = UpgradeCertificate(decision.leaf_hash, pending.request.desired_role, world.now, decision.nonce,
                               p0.node_id, None)
    cert = UpgradeCertificate(draft.leaf_hash, draft.new_role, draft.t, draft.nonce, p0.node_id,
                              sign_fields(provider, p0, draft.body()))
    previous = p0.issued.get(leaf_digest)
    promote_record(p0, pending.leaf_pk)
    scope = previous.scope if previous is not None else p0.scope()
    delegation = issue_delegation(provider, p0, pending.leaf_pk, Role.MANAGER, scope, world.validity(),
                                  decision.nonce)
    p0.proto.upgrade_certs.append(cert)
    world.record_issue("upgrade", p0, leaf_digest, decision.nonce)

    tenant = world.tenant_of(p0)
    full_path = tenant is not None and tenant.mode == DelegationMode.FULL_PATH
    body = {
        "upgrade": cert.to_wire(),
        "delegation": delegation.to_wire(),
        "chain": [c.to_wire() for c in (p0.cert_chain or [])] if full_path else [],
        "full_path": full_path,
    }
    world.send(p0, pending.leaf_pk, MsgType.UPGRADE_CERT, body, pending.trace_id)
    p0.audit(world.now, "upgrade_issue", fingerprint(leaf_digest))
    return cert


# Message handlers

def _on_upgrade_hint(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    leaf_pk = payload.signer_pk
    if world.salted_hash(node.tenant, leaf_pk) != bytes(payload.body["leaf_hash"]):
        raise DecisionMismatch("upgrade hint carries a foreign leaf hash")
    parent_sign_upgrade(world, node, leaf_pk, Role(payload.body["desired"]), payload.trace_id)


def _on_upgrade_request(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    req = UpgradeRequest.from_wire(payload.body["request"])
    attestation = ManagerAttestation.from_wire(payload.body["attestation"])
    flags = [PolicyFlag.from_wire(f) for f in payload.body["flags"]]
    child_pk = payload.signer_pk
    key = (req.leaf_hash, req.nonce)
    if key in node.proto.upgrade_routes:
        raise DecisionMismatch(f"{node.name} already routes this upgrade")
    node.audit(world.now, "upgrade_received", fingerprint(req.leaf_hash))

    verdict, reason = layer_verify(world, node, child_pk, req, attestation, flags)
    node.audit(world.now, "upgrade_verify", f"{verdict.value} {reason.value}".strip())
    world.trace.add(world.now, "policy", node.name, "", MsgType.UPGRADE_REQ.value, payload.trace_id,
                    f"{verdict.value} {reason.value}".strip())
    node.proto.upgrade_routes[key] = child_pk
    if verdict == FlagVerdict.DENY:
        _deny(world, node, req, reason, payload.trace_id)
        return

    flags.append(_flag(world, node, verdict, reason, req))
    if node.role == Role.ROOT:
        root_upgrade_decide(world, node, req, flags, payload.trace_id)
    else:
        body = {"request": req.to_wire(), "attestation": attestation.to_wire(),
                "flags": [f.to_wire() for f in flags]}
        world.send(node, node.parent, MsgType.UPGRADE_REQ, body, payload.trace_id)


def _on_upgrade_decision(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    decision = UpgradeDecision.from_wire(payload.body["decision"])
    if node.parent is None or payload.signer_pk != node.parent or not decision.verify(world.provider, node.parent):
        raise SignatureInvalid(f"upgrade decision at {node.name} is not signed by its parent")
    node.audit(world.now, "upgrade_decision", f"{decision.verdict.value} {decision.reason.value}".strip())
    propagate_decision(world, node, decision, payload.trace_id)


def _on_upgrade_cert(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    provider = world.provider
    if node.parent is None or payload.signer_pk != node.parent:
        raise SignatureInvalid("upgrade certificate not sent by the direct parent")
    cert = UpgradeCertificate.from_wire(payload.body["upgrade"])
    delegation = DelegationCertificate.from_wire(payload.body["delegation"])
    if not cert.verify(provider, node.parent) or not delegation.verify(provider, node.parent):
        raise SignatureInvalid("upgrade certificate does not verify under the parent key")
    if cert.leaf_hash != world.salted_hash(node.tenant, node.public) or delegation.subject_pk != node.public:
        raise DecisionMismatch("upgrade certificate names another member")
    if delegation.role != cert.new_role:
        raise DecisionMismatch("delegation role differs from the upgrade certificate")

    node.role = cert.new_role
    node.cert = delegation
    if payload.body.get("full_path"):
        node.cert_chain = [DelegationCertificate.from_wire(c) for c in payload.body["chain"]] + [delegation]
    node.audit(world.now, "promoted", cert.new_role.value)
    outcome = world.outcome(payload.trace_id, "upgrade", node.name)
    outcome.status = "approved"
    world.trace.add(world.now, "promoted", node.name, "", MsgType.UPGRADE_CERT.value, payload.trace_id,
                    cert.new_role.value)
    logging.info(f"{node.name} promoted to {cert.new_role.value}")


def install(world: "World") -> None:
    world.on(MsgType.UPGRADE_HINT, _on_upgrade_hint)
    world.on(MsgType.UPGRADE_REQ, _on_upgrade_request)
    world.on(MsgType.UPGRADE_DECISION, _on_upgrade_decision)
    world.on(MsgType.UPGRADE_CERT, _on_upgrade_cert)
