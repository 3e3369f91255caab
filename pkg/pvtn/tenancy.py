"""
Tenancy Module for PVTN

Several PVTNs share one overlay. This module keeps:
- TenantRegistry / TenantRecord: one record per root, with salt, delegation
  mode, designated gateway and policy
- Policy: per-tenant limits with per-node overrides
- CrossTenantDelegation: explicit, scoped trust bridges between tenants
- check_isolation: exhaustive cross-tenant attempt report
- check_snapshot_isolation: the same question over a saved snapshot
"""

import logging
import random
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

from pvtn.codec import encode
from pvtn.crypto import PublicKey, Signature, fingerprint
from pvtn.errors import DecryptionFailure, KeyNotVisible, NotAManager, PvtnError, ScopeExceeded
from pvtn.messaging import MsgType, make_payload, seal
from pvtn.tree import (
    DelegationCertificate,
    DelegationMode,
    NodeRecord,
    Validity,
    scope_contains,
    tenant_scope,
    verify_chain,
)

if TYPE_CHECKING:
    from pvtn.world import World


@dataclass(frozen=True)
class Policy:
    """Limits a layer applies when verifying upgrades and actions."""

    max_depth: int = 16
    max_subtree: int = 2 ** 16
    quota: Optional[int] = None
    deny_scopes: tuple = ()

    def denies(self, scope: str) -> bool:
        return any(scope_contains(denied, scope) for denied in self.deny_scopes)

    def merged(self, data: dict) -> "Policy":
        """Copy with the keys present in data replaced."""
        updates = {key: data[key] for key in ("max_depth", "max_subtree", "quota") if key in data}
        if "deny_scopes" in data:
            updates["deny_scopes"] = tuple(data["deny_scopes"])
        return replace(self, **updates)


@dataclass
class TenantRecord:
    name: str
    tenant_id: bytes
    root_name: str
    salt: bytes
    mode: DelegationMode = DelegationMode.HIERARCHICAL_ONLY
    gateway: Optional[str] = None
    policy: Policy = field(default_factory=Policy)
    overrides: dict = field(default_factory=dict)

    def policy_for(self, node_name: str) -> Policy:
        return self.overrides.get(node_name, self.policy)

    def scope(self, permission: str = "") -> str:
        return f"{tenant_scope(self.tenant_id)}:{permission}" if permission else tenant_scope(self.tenant_id)


class TenantRegistry:
    """All tenants on the shared overlay plus the bridges between them."""

    def __init__(self):
        self.tenants: dict = {}
        self.bridges: list = []

    def add(self, record: TenantRecord) -> TenantRecord:
        if record.tenant_id in self.tenants:
            raise ValueError(f"tenant {fingerprint(record.tenant_id)} already registered")
        self.tenants[record.tenant_id] = record
        return record

    def get(self, tenant_id: Optional[bytes]) -> Optional[TenantRecord]:
        return self.tenants.get(tenant_id) if tenant_id is not None else None

    def named(self, name: str) -> Optional[TenantRecord]:
        return next((t for t in self.tenants.values() if t.name == name), None)

    def all(self) -> list:
        return list(self.tenants.values())


@dataclass(frozen=True)
class CrossTenantDelegation:
    """A manager of one tenant granting a foreign key scoped, timed access."""

    issuer_digest: bytes
    issuer_tenant: bytes
    subject_pk: PublicKey
    scope: str
    validity: Validity
    actions: tuple
    issuer_chain: tuple
    nonce: bytes
    signature: Signature

    @staticmethod
    def body(issuer_digest: bytes, issuer_tenant: bytes, subject_pk: PublicKey, scope: str,
             validity: Validity, actions: tuple, nonce: bytes) -> dict:
        return {
            "issuer": issuer_digest,
            "tenant": issuer_tenant,
            "subject_pk": subject_pk,
            "scope": scope,
            "validity": validity.to_wire(),
            "actions": list(actions),
            "nonce": nonce,
        }

    def signed_bytes(self) -> bytes:
        return encode(self.body(self.issuer_digest, self.issuer_tenant, self.subject_pk, self.scope,
                                self.validity, self.actions, self.nonce))

    def to_wire(self) -> dict:
        wire = self.body(self.issuer_digest, self.issuer_tenant, self.subject_pk, self.scope,
                         self.validity, self.actions, self.nonce)
        wire["chain"] = [cert.to_wire() for cert in self.issuer_chain]
        wire["signature"] = self.signature.to_wire()
        return wire

    @classmethod
    def from_wire(cls, data: dict) -> "CrossTenantDelegation":
        return cls(
            issuer_digest=bytes(data["issuer"]),
            issuer_tenant=bytes(data["tenant"]),
            subject_pk=bytes(data["subject_pk"]),
            scope=str(data["scope"]),
            validity=Validity.from_wire(data["validity"]),
            actions=tuple(data["actions"]),
            issuer_chain=tuple(DelegationCertificate.from_wire(c) for c in data["chain"]),
            nonce=bytes(data["nonce"]),
            signature=Signature.from_wire(data["signature"]),
        )


def create_bridge(world: "World", issuer: NodeRecord, foreign_pk: PublicKey, scope: str,
                  duration: int, actions: tuple = ("read",)) -> CrossTenantDelegation:
    """
    Issue and register a trust bridge.

    The foreign key was exchanged out of band; the bridge never adds the
    foreign node to the issuer's tree and grants no issuance rights.

    Raises:
        NotAManager: issuer is a leaf
        ScopeExceeded: scope outside the issuer's own scope
    """
    if not issuer.can_issue():
        raise NotAManager(f"{issuer.name} is a {issuer.role.value} and cannot bridge")
    if not scope_contains(issuer.scope(), scope):
        raise ScopeExceeded(f"bridge scope {scope} exceeds {issuer.scope()}")

    now = world.now
    chain = tuple(world.view(issuer.tenant).chain_of(issuer))
    validity = Validity(now, now + duration)
    nonce = world.provider.new_nonce(world.rng)
    body = CrossTenantDelegation.body(issuer.node_id, issuer.tenant, foreign_pk, scope, validity, tuple(actions), nonce)
    bridge = CrossTenantDelegation(
        issuer_digest=issuer.node_id, issuer_tenant=issuer.tenant, subject_pk=foreign_pk,
        scope=scope, validity=validity, actions=tuple(actions), issuer_chain=chain,
        nonce=nonce, signature=world.provider.sign(issuer.keys.private, encode(body)),
    )
    world.tenancy.bridges.append(bridge)
    issuer.audit(now, "bridge", f"scope={scope} until={validity.not_after}")
    world.trace.add(now, "bridge", issuer.name, "", "", "", f"scope={scope.rsplit(':', 1)[-1]} duration={duration}")
    logging.info(f"{issuer.name} bridged key {fingerprint(world.provider.hash(foreign_pk))} for {duration} ticks")
    return bridge


def bridge_access_check(world: "World", bridge: CrossTenantDelegation, presenter: NodeRecord,
                        target_tenant: bytes, action_scope: str, action: str) -> tuple:
    """
    Decide whether a foreign node may act in target_tenant under a bridge.

    The presenter proves possession of the bridged key by signing a fresh
    challenge; the issuer's chain is verified against the issuing tenant's
    current root.

    Returns:
        tuple: (granted: bool, reason: str)
    """
    provider = world.provider
    now = world.now
    if bridge.issuer_tenant != target_tenant:
        return False, "ForeignBridge"
    if presenter.public != bridge.subject_pk:
        return False, "NotSubject"

    challenge = provider.new_nonce(world.rng)
    proof = provider.sign(presenter.keys.private, challenge)
    if not provider.verify(bridge.subject_pk, challenge, proof):
        return False, "SignatureInvalid"

    view = world.view(target_tenant)
    if view.root is None:
        return False, "UnknownTenant"
    revoked = view.revoked_digests()
    if bridge.issuer_chain:
        if not verify_chain(provider, list(bridge.issuer_chain), view.root.public, now, revoked, view.retired()):
            return False, "IssuerChain"
        issuer_pk = bridge.issuer_chain[-1].subject_pk
    else:
        issuer_pk = view.root.public
    if provider.hash(issuer_pk) != bridge.issuer_digest:
        return False, "IssuerChain"
    if bridge.issuer_digest in revoked:
        return False, "IssuerRevoked"
    if not provider.verify(issuer_pk, bridge.signed_bytes(), bridge.signature):
        return False, "SignatureInvalid"
    if not bridge.validity.contains(now):
        return False, "Expired"
    if not scope_contains(bridge.scope, action_scope):
        return False, "ScopeExceeded"
    if action not in bridge.actions:
        return False, "ActionNotPermitted"
    return True, "ok"


@dataclass(frozen=True)
class IsolationAttempt:
    actor: str
    tenant: str
    operation: str
    target: str
    outcome: str
    allowed: bool = False

    def render(self) -> str:
        tag = " (trust event)" if self.allowed else ""
        return f"{self.actor} -> {self.tenant} {self.operation} {self.target}: {self.outcome}{tag}"


@dataclass
class IsolationReport:
    attempts: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def record(self, attempt: IsolationAttempt, succeeded: bool) -> None:
        self.attempts.append(attempt)
        if succeeded and not attempt.allowed:
            self.violations.append(attempt)

    def render(self) -> str:
        lines = [attempt.render() for attempt in self.attempts]
        lines.append(f"attempts={len(self.attempts)} violations={len(self.violations)}")
        for violation in self.violations:
            lines.append(f"VIOLATION {violation.render()}")
        return "\n".join(lines)


def _foreign_actors(world: "World", tenant: TenantRecord) -> list:
    actors = []
    for record in world.nodes.values():
        if record.tenant == tenant.tenant_id or record.name == tenant.gateway:
            continue
        actors.append(record)
    return actors


def check_isolation(world: "World", rng: Optional[random.Random] = None) -> IsolationReport:
    """
    Try every cross-tenant operation for every foreign node.

    Operations: join (seal a join request to each manager), decrypt (open
    every captured envelope addressed into the tenant), verify (check each
    member chain against every key the actor holds), enumerate (hold member
    keys) and bridge access at the bridged scope and at the tenant scope.
    Successes that stem from an explicit trust event are reported but are
    not violations.
    """
    provider = world.provider
    rng = rng or random.Random(world.seed)
    report = IsolationReport()

    for tenant in world.tenancy.all():
        view = world.view(tenant.tenant_id)
        members = view.members()
        member_keys = {m.public for m in members}
        member_digests = {m.node_id: m for m in members}
        envelopes = {}
        for wire in world.wire:
            if wire.envelope.recipient_digest in member_digests:
                envelopes.setdefault(wire.envelope.ciphertext, wire.envelope)

        for actor in _foreign_actors(world, tenant):
            anchors = set(actor.known_keys) | set(actor.disclosed)
            own = world.tenancy.get(actor.tenant)
            if own is not None:
                own_root = world.view(own.tenant_id).root
                if own_root is not None:
                    anchors.add(own_root.public)

            for manager in members:
                if not manager.can_issue():
                    continue
                payload = make_payload(provider, rng, actor, MsgType.JOIN_REQ,
                                       {"probe": True}, world.now, "00" * 8)
                try:
                    seal(provider, rng, actor, manager.public, payload, signed=False)
                    outcome, succeeded = "sealed", True
                except KeyNotVisible:
                    outcome, succeeded = "KeyNotVisible", False
                report.record(IsolationAttempt(actor.name, tenant.name, "join", manager.name, outcome,
                                               allowed=manager.public in actor.disclosed), succeeded)

            for env in envelopes.values():
                recipient = member_digests[env.recipient_digest]
                try:
                    provider.decrypt(actor.keys.private, env.ciphertext)
                    outcome, succeeded = "decrypted", True
                except (DecryptionFailure, PvtnError):
                    outcome, succeeded = "DecryptionFailure", False
                report.record(IsolationAttempt(actor.name, tenant.name, "decrypt", recipient.name, outcome,
                                               allowed=actor.public == recipient.public), succeeded)

            for member in members:
                chain = view.chain_of(member)
                if not chain:
                    continue
                accepted = [a for a in anchors
                            if verify_chain(provider, chain, a, world.now, view.revoked_digests(), view.retired())]
                outcome = "verified" if accepted else "SignatureInvalid"
                allowed = bool(accepted) and all(a in actor.disclosed for a in accepted)
                report.record(IsolationAttempt(actor.name, tenant.name, "verify", member.name, outcome,
                                               allowed=allowed), bool(accepted))

            held = (set(actor.known_keys) & member_keys) - {actor.public}
            report.record(IsolationAttempt(actor.name, tenant.name, "enumerate", "members",
                                           f"holds {len(held)} member key(s)",
                                           allowed=held <= set(actor.disclosed)), bool(held))

            for bridge in world.tenancy.bridges:
                if bridge.issuer_tenant != tenant.tenant_id:
                    continue
                action = bridge.actions[0] if bridge.actions else "read"
                granted, reason = bridge_access_check(world, bridge, actor, tenant.tenant_id, bridge.scope, action)
                report.record(IsolationAttempt(actor.name, tenant.name, "bridge", bridge.scope.rsplit(":", 1)[-1],
                                               reason, allowed=actor.public == bridge.subject_pk), granted)
                wide, reason = bridge_access_check(world, bridge, actor, tenant.tenant_id,
                                                   tenant_scope(tenant.tenant_id), action)
                report.record(IsolationAttempt(
                    actor.name, tenant.name, "bridge", "tenant-wide", reason,
                    allowed=actor.public == bridge.subject_pk and scope_contains(bridge.scope, tenant_scope(tenant.tenant_id)),
                ), wide)

    logging.info(f"Isolation check: {len(report.attempts)} attempts, {len(report.violations)} violations")
    return report


def check_snapshot_isolation(snapshot: dict) -> IsolationReport:
    """
    Isolation over a saved world snapshot.

    A snapshot carries public data only, so this covers the enumerate and
    verify attempts: a foreign node holding a member's key, or the tenant
    root's key needed to verify member chains. Holdings that came from an
    explicit disclosure are reported but are not violations.
    """
    report = IsolationReport()
    actors = [dict(node, tenant=t["name"]) for t in snapshot["tenants"] for node in t["nodes"]]
    actors += [dict(node, tenant=None) for node in snapshot.get("externals", [])]

    for tenant in snapshot["tenants"]:
        members = {node["digest"] for node in tenant["nodes"] if not node["revoked"]}
        root = next((node["digest"] for node in tenant["nodes"] if node["role"] == "root"), None)
        for actor in actors:
            if actor["tenant"] == tenant["name"] or actor["name"] == tenant.get("gateway"):
                continue
            known = set(actor["known_keys"])
            disclosed = set(actor["disclosed"])
            held = (known & members) - {actor["digest"]}
            report.record(IsolationAttempt(actor["name"], tenant["name"], "enumerate", "members",
                                           f"holds {len(held)} member key(s)", allowed=held <= disclosed), bool(held))
            if root is not None:
                anchored = root in known
                report.record(IsolationAttempt(actor["name"], tenant["name"], "verify", "chains",
                                               "anchor held" if anchored else "SignatureInvalid",
                                               allowed=root in disclosed), anchored)
    logging.info(f"Snapshot isolation: {len(report.attempts)} attempts, {len(report.violations)} violations")
    return report
