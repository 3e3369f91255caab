"""
Tree Module for PVTN

The PVTN data model: node records, roles, parent/child links, scoped key
visibility, delegation certificates and revocation state. The operations
here are the direct, synchronous forms of tree maintenance:
- create_root / new_node: key generation and trust-anchor setup
- issue_delegation / attach_child: Cert_{p->c} issuance and acceptance
- verify_chain: root-to-member chain verification
- revoke: subtree revocation with tenant-wide replication on compromise
- rotate_keys: manager-local key rotation
- promote_record: leaf-to-manager promotion after an approved upgrade

Message-driven propagation of the same state changes lives in lifecycle.py.
"""

import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

from pvtn.codec import encode
from pvtn.crypto import CryptoProvider, Digest, KeyPair, PublicKey, Signature, fingerprint
from pvtn.errors import IssuerRevoked, NotAManager, NotAuthorized, ScopeExceeded, UpgradeNotApproved


class Role(str, Enum):
    ROOT = "root"
    MANAGER = "manager"
    LEAF = "leaf"


class RevocationReason(str, Enum):
    VOLUNTARY_LEAVE = "voluntary_leave"
    TERMINATION = "termination"
    COMPROMISE = "compromise"


class DelegationMode(str, Enum):
    HIERARCHICAL_ONLY = "hierarchical"
    FULL_PATH = "full_path"


ISSUING_ROLES = (Role.ROOT, Role.MANAGER)


def tenant_scope(tenant_id: bytes) -> str:
    return f"tenant:{tenant_id.hex()}"


def scope_label(tenant_id: bytes, permission: str) -> str:
    """Build a "tenant:<id>:<permission>" label."""
    return f"{tenant_scope(tenant_id)}:{permission}" if permission else tenant_scope(tenant_id)


def scope_contains(outer: str, inner: str) -> bool:
    """Prefix containment over ':'-separated scope labels."""
    return inner == outer or inner.startswith(outer + ":")


@dataclass(frozen=True)
class Validity:
    """Closed interval of logical ticks."""

    not_before: int
    not_after: int

    def __post_init__(self):
        if self.not_after < self.not_before:
            raise ValueError(f"empty validity interval [{self.not_before}, {self.not_after}]")

    def contains(self, now: int) -> bool:
        return self.not_before <= now <= self.not_after

    def to_wire(self) -> list:
        return [self.not_before, self.not_after]

    @classmethod
    def from_wire(cls, data: list) -> "Validity":
        return cls(int(data[0]), int(data[1]))


@dataclass(frozen=True)
class DelegationCertificate:
    """Cert_{p->c} = Sign_{SK_p}(PK_c, Role, Scope, Validity, r)."""

    subject_pk: PublicKey
    role: Role
    scope: str
    validity: Validity
    nonce: bytes
    issuer_pk_digest: Digest
    signature: Signature

    @staticmethod
    def body(subject_pk: PublicKey, role: Role, scope: str, validity: Validity,
             nonce: bytes, issuer_pk_digest: Digest) -> dict:
        return {
            "subject_pk": subject_pk,
            "role": role.value,
            "scope": scope,
            "validity": validity.to_wire(),
            "nonce": nonce,
            "issuer": issuer_pk_digest,
        }

    def signed_bytes(self) -> bytes:
        return encode(self.body(self.subject_pk, self.role, self.scope, self.validity,
                                self.nonce, self.issuer_pk_digest))

    def verify(self, provider: CryptoProvider, issuer_pk: PublicKey) -> bool:
        if self.issuer_pk_digest != provider.hash(issuer_pk):
            return False
        return provider.verify(issuer_pk, self.signed_bytes(), self.signature)

    def to_wire(self) -> dict:
        wire = self.body(self.subject_pk, self.role, self.scope, self.validity,
                         self.nonce, self.issuer_pk_digest)
        wire["signature"] = self.signature.to_wire()
        return wire

    @classmethod
    def from_wire(cls, data: dict) -> "DelegationCertificate":
        return cls(
            subject_pk=bytes(data["subject_pk"]),
            role=Role(data["role"]),
            scope=str(data["scope"]),
            validity=Validity.from_wire(data["validity"]),
            nonce=bytes(data["nonce"]),
            issuer_pk_digest=bytes(data["issuer"]),
            signature=Signature.from_wire(data["signature"]),
        )

    @classmethod
    def from_json(cls, data: dict) -> "DelegationCertificate":
        """Inverse of the hex form used in snapshots and certificate files."""
        signature = data["signature"]
        return cls.from_wire({
            **data,
            "subject_pk": bytes.fromhex(data["subject_pk"]),
            "nonce": bytes.fromhex(data["nonce"]),
            "issuer": bytes.fromhex(data["issuer"]),
            "signature": {"signer_hint": bytes.fromhex(signature["signer_hint"]),
                          "value": bytes.fromhex(signature["value"])},
        })


@dataclass(frozen=True)
class RevocationNotice:
    subject_pk_digest: Digest
    issued_at: int
    reason: RevocationReason
    issuer_digest: Digest
    signature: Signature

    @staticmethod
    def body(subject: Digest, issued_at: int, reason: RevocationReason, issuer: Digest) -> dict:
        return {"subject": subject, "issued_at": issued_at, "reason": reason.value, "issuer": issuer}

    def signed_bytes(self) -> bytes:
        return encode(self.body(self.subject_pk_digest, self.issued_at, self.reason, self.issuer_digest))

    def to_wire(self) -> dict:
        wire = self.body(self.subject_pk_digest, self.issued_at, self.reason, self.issuer_digest)
        wire["signature"] = self.signature.to_wire()
        return wire

    @classmethod
    def from_wire(cls, data: dict) -> "RevocationNotice":
        return cls(
            subject_pk_digest=bytes(data["subject"]),
            issued_at=int(data["issued_at"]),
            reason=RevocationReason(data["reason"]),
            issuer_digest=bytes(data["issuer"]),
            signature=Signature.from_wire(data["signature"]),
        )


class NonceCache:
    """Bounded set of recently seen nonces; oldest entries fall out first."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._entries: "OrderedDict[bytes, None]" = OrderedDict()

    def __contains__(self, nonce: bytes) -> bool:
        return nonce in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, nonce: bytes) -> None:
        self._entries[nonce] = None
        self._entries.move_to_end(nonce)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)


@dataclass(frozen=True)
class AuditEntry:
    tick: int
    event: str
    detail: str = ""


@dataclass
class ProtocolState:
    """Per-node scratch state of the running protocols, keyed per request."""

    pending_joins: dict = field(default_factory=dict)
    aggregations: dict = field(default_factory=dict)
    seen_probes: set = field(default_factory=set)
    decisions: dict = field(default_factory=dict)
    inflight: dict = field(default_factory=dict)
    candidate: Any = None
    pending_upgrades: dict = field(default_factory=dict)
    upgrade_routes: dict = field(default_factory=dict)
    upgrade_approvals: set = field(default_factory=set)
    upgrade_certs: list = field(default_factory=list)
    pending_actions: dict = field(default_factory=dict)
    action_routes: dict = field(default_factory=dict)
    action_certs: list = field(default_factory=list)
    validations: dict = field(default_factory=dict)
    challenges: dict = field(default_factory=dict)
    rejections: list = field(default_factory=list)


@dataclass(eq=False)
class NodeRecord:
    """
    One participant of a PVTN.

    known_keys is the only key material a node may encrypt to or verify
    against: its parent, its direct children, its designated gateway and
    keys disclosed to it through explicit out-of-band trust events.
    """

    name: str
    keys: KeyPair
    node_id: Digest
    role: Role = Role.LEAF
    tenant: Optional[bytes] = None
    parent: Optional[PublicKey] = None
    children: dict = field(default_factory=dict)
    known_keys: set = field(default_factory=set)
    disclosed: set = field(default_factory=set)
    pending_peers: set = field(default_factory=set)
    admission: set = field(default_factory=set)
    gateway_pk: Optional[PublicKey] = None
    is_gateway: bool = False
    nonce_cache: NonceCache = field(default_factory=NonceCache)
    revoked: bool = False
    revoked_at: Optional[int] = None
    cert: Optional[DelegationCertificate] = None
    cert_chain: Optional[list] = None
    revocations: set = field(default_factory=set)
    retired: dict = field(default_factory=dict)
    issued: dict = field(default_factory=dict)
    audit_log: list = field(default_factory=list)
    proto: ProtocolState = field(default_factory=ProtocolState)
    verifications: int = 0

    @property
    def public(self) -> PublicKey:
        return self.keys.public

    def audit(self, tick: int, event: str, detail: str = "") -> None:
        self.audit_log.append(AuditEntry(tick, event, detail))

    def can_issue(self) -> bool:
        return self.role in ISSUING_ROLES

    def scope(self) -> str:
        """Scope this node may delegate from."""
        if self.role == Role.ROOT and self.tenant is not None:
            return tenant_scope(self.tenant)
        return self.cert.scope if self.cert is not None else ""

    def snapshot(self, include_revocations: bool = True) -> dict:
        """Security-relevant state, comparable across two points in time."""
        snap = {
            "public": self.keys.public,
            "role": self.role.value,
            "tenant": self.tenant,
            "parent": self.parent,
            "children": sorted((pk, role.value) for pk, role in self.children.items()),
            "known_keys": sorted(self.known_keys),
            "revoked": self.revoked,
            "cert": self.cert.signature.value if self.cert else None,
            "is_gateway": self.is_gateway,
        }
        if include_revocations:
            snap["revocations"] = sorted(self.revocations)
        return snap


def new_node(provider: CryptoProvider, rng: random.Random, name: str,
             keys: Optional[KeyPair] = None, nonce_capacity: int = 4096) -> NodeRecord:
    """Create a node outside any tenant (a prospective member)."""
    keys = keys or provider.generate_keypair(rng)
    return NodeRecord(name=name, keys=keys, node_id=provider.hash(keys.public),
                      nonce_cache=NonceCache(nonce_capacity))


def create_root(provider: CryptoProvider, rng: random.Random, name: str = "root",
                keys: Optional[KeyPair] = None, nonce_capacity: int = 4096) -> NodeRecord:
    """
    Create a tenant root: the trust anchor of a new PVTN.

    The tenant id is the digest of the root's initial public key and stays
    fixed for the life of the tenant, across later root key rotations.
    """
    root = new_node(provider, rng, name, keys, nonce_capacity)
    root.role = Role.ROOT
    root.tenant = root.node_id
    logging.info(f"Created root {name} for tenant {fingerprint(root.tenant)}")
    return root


def issue_delegation(provider: CryptoProvider, parent: NodeRecord, child_pk: PublicKey,
                     role: Role, scope: str, validity: Validity, nonce: bytes) -> DelegationCertificate:
    """
    Issue Cert_{parent->child} and register the child under the parent.

    Raises:
        NotAManager: parent is a leaf
        IssuerRevoked: parent has been revoked
        NotAuthorized: attempt to issue a Root role
        ScopeExceeded: scope outside the parent's own scope
    """
    if not parent.can_issue():
        raise NotAManager(f"{parent.name} is a {parent.role.value} and cannot delegate")
    if parent.revoked:
        raise IssuerRevoked(f"{parent.name} is revoked")
    if role == Role.ROOT:
        raise NotAuthorized("the root role cannot be delegated")
    if not scope_contains(parent.scope(), scope):
        raise ScopeExceeded(f"scope {scope} exceeds {parent.scope()}")

    body = DelegationCertificate.body(child_pk, role, scope, validity, nonce, parent.node_id)
    cert = DelegationCertificate(
        subject_pk=child_pk, role=role, scope=scope, validity=validity, nonce=nonce,
        issuer_pk_digest=parent.node_id, signature=provider.sign(parent.keys.private, encode(body)),
    )
    parent.children[child_pk] = role
    parent.known_keys.add(child_pk)
    parent.issued[provider.hash(child_pk)] = cert
    return cert


def attach_child(child: NodeRecord, parent_pk: PublicKey, tenant: bytes,
                 cert: DelegationCertificate, chain_prefix: Optional[list] = None) -> None:
    """Accept a delegation on the child's side. chain_prefix is set in FullPath mode."""
    child.parent = parent_pk
    child.tenant = tenant
    child.role = cert.role
    child.cert = cert
    child.known_keys.add(parent_pk)
    child.pending_peers.discard(parent_pk)
    if chain_prefix is not None:
        child.cert_chain = list(chain_prefix) + [cert]


def verify_chain(provider: CryptoProvider, chain: list, trust_anchor: PublicKey, now: int,
                 revoked: Iterable[bytes] = (), retired: Optional[dict] = None) -> bool:
    """
    Verify a root-to-member delegation chain.

    True iff chain[0] is issued under trust_anchor, each subject issues the
    next link and holds an issuing role, every signature verifies, every
    validity interval contains now (an interval ends at its issuer's key
    retirement tick), and no subject digest is revoked.
    """
    if not chain:
        return False
    revoked = set(revoked)
    retired = retired or {}
    issuer_pk = trust_anchor
    for index, cert in enumerate(chain):
        if index > 0 and chain[index - 1].role not in ISSUING_ROLES:
            return False
        if not cert.verify(provider, issuer_pk):
            return False
        if not cert.validity.contains(now) or cert_retired(cert, now, retired):
            return False
        if provider.hash(cert.subject_pk) in revoked:
            return False
        issuer_pk = cert.subject_pk
    return True


def cert_retired(cert: DelegationCertificate, now: int, retired: dict) -> bool:
    """True when the issuing key was rotated out at or before now."""
    cutoff = retired.get(cert.issuer_pk_digest)
    return cutoff is not None and now >= cutoff


class TreeView:
    """
    Read view over the records of one tenant.

    Built from the simulator's node table; lookups go by public key, the
    way parent and children links are stored.
    """

    def __init__(self, provider: CryptoProvider, records: Iterable[NodeRecord]):
        self.provider = provider
        self.records = list(records)
        self.by_pk: dict = {}
        self.root: Optional[NodeRecord] = None
        for record in self.records:
            current = self.by_pk.get(record.public)
            if current is None or (current.revoked and not record.revoked):
                self.by_pk[record.public] = record
            if record.role == Role.ROOT:
                self.root = record

    def record(self, pk: PublicKey) -> Optional[NodeRecord]:
        return self.by_pk.get(pk)

    def children_of(self, node: NodeRecord) -> list:
        found = []
        for pk in node.children:
            child = self.by_pk.get(pk)
            if child is not None and child.parent == node.public:
                found.append(child)
        return found

    def subtree(self, node: NodeRecord) -> list:
        """Node and all its descendants in preorder."""
        ordered = []
        stack = [node]
        seen = set()
        while stack:
            current = stack.pop()
            if id(current) in seen:
                continue
            seen.add(id(current))
            ordered.append(current)
            stack.extend(reversed(self.children_of(current)))
        return ordered

    def path_from_root(self, node: NodeRecord) -> list:
        path = [node]
        current = node
        while current.parent is not None:
            parent = self.by_pk.get(current.parent)
            if parent is None or len(path) > len(self.records):
                break
            path.append(parent)
            current = parent
        path.reverse()
        return path

    def depth(self, node: NodeRecord) -> int:
        return len(self.path_from_root(node)) - 1

    def height(self) -> int:
        return max((self.depth(r) for r in self.members()), default=0)

    def members(self, include_revoked: bool = False) -> list:
        return [r for r in self.records if include_revoked or not r.revoked]

    def chain_of(self, node: NodeRecord) -> list:
        """Certificates along the root-to-node path, re-derived from the tree."""
        return [hop.cert for hop in self.path_from_root(node)[1:] if hop.cert is not None]

    def revoked_digests(self) -> set:
        return {r.node_id for r in self.records if r.revoked}

    def retired(self) -> dict:
        merged: dict = {}
        for record in self.records:
            merged.update(record.retired)
        return merged

    def dump(self) -> str:
        """Line-oriented snapshot: digest, role, parent digest, tenant, revoked flag."""
        lines = []
        for record in self.records:
            parent = self.by_pk.get(record.parent) if record.parent else None
            parent_digest = parent.node_id.hex()[:16] if parent else (
                self.provider.hash(record.parent).hex()[:16] if record.parent else "-")
            tenant = record.tenant.hex()[:16] if record.tenant else "-"
            lines.append(f"{record.node_id.hex()[:16]} {record.role.value} {parent_digest} {tenant} {int(record.revoked)}")
        return "\n".join(lines)


def revoke(provider: CryptoProvider, manager: NodeRecord, subject_pk: PublicKey,
           reason: RevocationReason, tree: TreeView, now: int,
           propagate: bool = True) -> tuple:
    """
    Revoke a member and its whole subtree.

    The manager and every node between it and the subject add the revoked
    digests to their revocation sets.

    Args:
        manager: revoking manager; must be a strict ancestor of the subject
        subject_pk: public key of the member to revoke
        reason: why the member is revoked
        tree: view of the tenant
        now: current tick
        propagate: replicate Compromise notices tenant-wide directly; the
            simulator passes False and propagates over the tree instead

    Returns:
        tuple: (RevocationNotice, list of affected NodeRecords)

    Raises:
        NotAuthorized: subject is not below the manager
        IssuerRevoked: the manager itself is revoked
    """
    if manager.revoked:
        raise IssuerRevoked(f"{manager.name} is revoked")
    subject = tree.record(subject_pk)
    if subject is None or subject is manager:
        raise NotAuthorized(f"{manager.name} has no member with that key")
    ancestors = tree.path_from_root(subject)[:-1]
    if not any(a is manager for a in ancestors):
        raise NotAuthorized(f"{subject.name} is outside the subtree of {manager.name}")

    affected = tree.subtree(subject)
    for record in affected:
        if not record.revoked:
            record.revoked = True
            record.revoked_at = now
    digests = {record.node_id for record in affected}
    below = ancestors[next(i for i, a in enumerate(ancestors) if a is manager):]
    for ancestor in below:
        ancestor.revocations |= digests

    body = RevocationNotice.body(subject.node_id, now, reason, manager.node_id)
    notice = RevocationNotice(
        subject_pk_digest=subject.node_id, issued_at=now, reason=reason,
        issuer_digest=manager.node_id, signature=provider.sign(manager.keys.private, encode(body)),
    )
    manager.audit(now, "revoke", f"{subject.name} reason={reason.value} affected={len(affected)}")

    if propagate and reason == RevocationReason.COMPROMISE:
        for record in tree.members():
            record.revocations |= digests
    logging.info(f"{manager.name} revoked {subject.name} ({reason.value}), {len(affected)} node(s) affected")
    return notice, affected


def _swap_key(mapping: dict, old: PublicKey, new: PublicKey) -> dict:
    return {(new if pk == old else pk): value for pk, value in mapping.items()}


def rotate_keys(provider: CryptoProvider, rng: random.Random, manager: NodeRecord,
                tree: TreeView, now: int, validity_ticks: int,
                mode: DelegationMode = DelegationMode.HIERARCHICAL_ONLY) -> tuple:
    """
    Replace a manager's key pair and reissue its children's certificates.

    Only the manager, its parent's children map (plus the parent's
    re-certification of the manager) and its direct children change.
    Certificates issued under the old key expire at the rotation tick.

    Returns:
        tuple: (new KeyPair, list of reissued DelegationCertificates for direct children)

    Raises:
        NotAManager: manager is a leaf
    """
    if not manager.can_issue():
        raise NotAManager(f"{manager.name} is a {manager.role.value}")

    old_pk, old_digest = manager.public, manager.node_id
    children = tree.children_of(manager)
    parent = tree.record(manager.parent) if manager.parent else None

    manager.keys = provider.generate_keypair(rng)
    manager.node_id = provider.hash(manager.public)
    manager.retired[old_digest] = now
    validity = Validity(now, now + validity_ticks)

    if parent is not None:
        parent.children = _swap_key(parent.children, old_pk, manager.public)
        parent.known_keys.discard(old_pk)
        parent.known_keys.add(manager.public)
        parent.issued.pop(old_digest, None)
        scope = manager.cert.scope if manager.cert else parent.scope()
        manager.cert = issue_delegation(provider, parent, manager.public, manager.role, scope,
                                        validity, provider.new_nonce(rng))
        if mode == DelegationMode.FULL_PATH:
            manager.cert_chain = list(parent.cert_chain or []) + [manager.cert]

    reissued = []
    for child in children:
        if child.revoked:
            continue
        scope = child.cert.scope if child.cert else manager.scope()
        cert = issue_delegation(provider, manager, child.public, child.role, scope,
                                validity, provider.new_nonce(rng))
        manager.issued.pop(provider.hash(child.public), None)
        manager.issued[child.node_id] = cert
        child.known_keys.discard(old_pk)
        child.retired[old_digest] = now
        prefix = list(manager.cert_chain or []) if mode == DelegationMode.FULL_PATH else None
        attach_child(child, manager.public, child.tenant, cert, prefix)
        reissued.append(cert)

    manager.audit(now, "rotate", f"reissued={len(reissued)}")
    logging.info(f"{manager.name} rotated keys at tick {now}, {len(reissued)} certificate(s) reissued")
    return manager.keys, reissued


def refresh_chain(child: NodeRecord, parent_chain: list) -> None:
    """FullPath mode: rebuild a stored chain from the parent's current chain."""
    if child.cert is not None:
        child.cert_chain = list(parent_chain) + [child.cert]


def promote_record(parent: NodeRecord, child_pk: PublicKey, child: Optional[NodeRecord] = None) -> None:
    """
    Promote a leaf child to manager after an approved upgrade run.

    Raises:
        UpgradeNotApproved: no approved, unused upgrade decision for child_pk
    """
    if child_pk not in parent.proto.upgrade_approvals:
        raise UpgradeNotApproved(f"no approved upgrade for this child of {parent.name}")
    parent.proto.upgrade_approvals.discard(child_pk)
    parent.children[child_pk] = Role.MANAGER
    if child is not None:
        child.role = Role.MANAGER


def allowed_keys(node: NodeRecord) -> set:
    allowed = set(node.children) | set(node.disclosed)
    if node.parent is not None:
        allowed.add(node.parent)
    if node.gateway_pk is not None:
        allowed.add(node.gateway_pk)
    return allowed


def visibility_violations(node: NodeRecord) -> set:
    """Keys a node holds beyond parent, children, gateway and disclosed keys."""
    return set(node.known_keys) - allowed_keys(node)


def tree_problems(view: TreeView) -> list:
    """
    Check the rooted-tree and uniqueness invariants of one tenant.

    Returns:
        list: human-readable problems, empty when the tenant is well formed
    """
    problems = []
    members = view.members()
    roots = [r for r in members if r.role == Role.ROOT]
    if len(roots) != 1:
        problems.append(f"expected one root, found {len(roots)}")
    seen_ids: dict = {}
    for record in members:
        if record.node_id in seen_ids:
            problems.append(f"duplicate key digest {fingerprint(record.node_id)} "
                            f"({seen_ids[record.node_id]}, {record.name})")
        seen_ids[record.node_id] = record.name
        if record.role == Role.ROOT:
            if record.parent is not None:
                problems.append(f"root {record.name} has a parent")
            continue
        if record.role == Role.LEAF and record.children:
            live = [pk for pk in record.children if (c := view.record(pk)) is not None and not c.revoked]
            if live:
                problems.append(f"leaf {record.name} has children")
        parent = view.record(record.parent) if record.parent else None
        if parent is None:
            problems.append(f"{record.name} has no parent in the tenant")
            continue
        if record.public not in parent.children:
            problems.append(f"{parent.name} does not list {record.name} as a child")
        path = view.path_from_root(record)
        if path[0].role != Role.ROOT:
            problems.append(f"{record.name} does not reach the root (cycle or detached)")
    return problems
