"""
Adversary Module for PVTN

A Dolev-Yao attacker wired into the overlay:
- sees every envelope on the wire and may drop, modify, replay or inject
  envelopes (intercept / apply_adversary)
- spawns Sybil identities and compromises nodes, learning only the victim's
  key pair and a copy of its local state
- signs and decrypts only with keys it actually holds; anything else is a
  ModelViolation

Checks built on top of it:
- compromise_containment_check: forged authority messages from a
  compromised key change state only inside the victim's subtree
- locality_check: revocation and rotation touch only the expected nodes
- wire_scan / storage_exposure: no raw member key crosses the wire in
  clear, and storage never sees one
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable, Optional

from pvtn.codec import encode
from pvtn.crypto import KeyPair, PublicKey, fingerprint
from pvtn.errors import DecryptionFailure, ModelViolation, ScenarioError
from pvtn.join_protocol import DecisionRecord, Verdict, initiate_join
from pvtn.lifecycle import revoke_member, rotate_member_keys
from pvtn.messaging import ControlPayload, Envelope, EnvelopeKind, MsgType
from pvtn.overlay import EventKind, SimEvent
from pvtn.tree import (
    DelegationCertificate,
    NodeRecord,
    NonceCache,
    ProtocolState,
    RevocationNotice,
    RevocationReason,
    Role,
    tenant_scope,
)
from pvtn.upgrade_protocol import UpgradeCertificate

if TYPE_CHECKING:
    from pvtn.world import World

ADVERSARY_ADDRESS = "adversary"

# Messages that carry authority from a parent; a compromised key tries each of them
AUTHORITY_TEMPLATES = ("decision", "join_cert", "upgrade_cert", "key_rotation", "chain_refresh", "revocation")

TEMPLATE_TYPES = {
    "raw": MsgType.JOIN_REQ,
    "decision": MsgType.DECISION,
    "join_cert": MsgType.JOIN_CERT,
    "upgrade_cert": MsgType.UPGRADE_CERT,
    "key_rotation": MsgType.KEY_ROTATION,
    "chain_refresh": MsgType.CHAIN_REFRESH,
    "revocation": MsgType.REVOCATION_NOTICE,
}


class AdversaryKind(str, Enum):
    EAVESDROP = "Eavesdrop"
    REPLAY = "Replay"
    MODIFY = "Modify"
    INJECT = "Inject"
    DROP = "Drop"
    SYBIL_SPAWN = "SybilSpawn"
    COMPROMISE = "Compromise"


@dataclass(frozen=True)
class AdversaryAction:
    """
    One scripted adversary step.

    match filters captured traffic by message label, target names a
    destination (Drop, Modify, Replay), an injection recipient or a
    compromise victim. Drop and Modify stay armed for count envelopes.
    """

    kind: AdversaryKind
    at: int = 0
    match: str = ""
    target: str = ""
    occurrence: int = 0
    count: int = 1
    field: str = "ciphertext"
    offset: int = 0
    template: str = "raw"
    claim: str = ""
    signer: str = ""
    manager: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "AdversaryAction":
        try:
            kind = AdversaryKind(data["kind"])
        except (KeyError, ValueError) as e:
            raise ScenarioError(f"unknown adversary kind {data.get('kind')!r}") from e
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__ and k != "kind"}
        action = cls(kind=kind, **known)
        if action.kind == AdversaryKind.INJECT and action.template not in TEMPLATE_TYPES:
            raise ScenarioError(f"unknown injection template {action.template!r}")
        if action.kind == AdversaryKind.MODIFY and action.field not in ("ciphertext", "trace_id", "recipient"):
            raise ScenarioError(f"cannot modify envelope field {action.field!r}")
        return action


@dataclass
class Capture:
    tick: int
    src: str
    dst: str
    label: str
    envelope: Envelope
    final: bool


@dataclass
class Rule:
    action: AdversaryAction
    remaining: int

    def matches(self, event: SimEvent) -> bool:
        if self.remaining <= 0:
            return False
        if self.action.match and event.label != self.action.match:
            return False
        return not self.action.target or event.target == self.action.target


@dataclass(frozen=True)
class Recovery:
    tick: int
    recipient: str
    msg_type: str
    own: bool


class Adversary:
    """Network-controlling attacker state for one world."""

    def __init__(self):
        self.keys: dict = {}
        self.identities: set = set()
        self.stolen: dict = {}
        self.captured: list = []
        self.rules: list = []
        self.recovered: list = []
        self.sybils: list = []
        self.injected = 0
        self.tampered = 0
        self.violations: list = []

    # Key custody

    def adopt(self, record: NodeRecord) -> None:
        """Take control of an attacker-owned identity."""
        self.keys[record.name] = record.keys
        self.identities.add(record.name)

    def holds(self, name: str) -> bool:
        return name in self.keys

    def key_for(self, name: str) -> KeyPair:
        keys = self.keys.get(name)
        if keys is None:
            self.violations.append(f"signing as {name}")
            raise ModelViolation(f"adversary does not hold the private key of {name}")
        return keys

    def compromise(self, world: "World", name: str) -> NodeRecord:
        """Learn one node's key pair and a copy of its local state."""
        record = world.node(name)
        self.keys[name] = record.keys
        self.stolen[name] = replace(
            record,
            children=dict(record.children), known_keys=set(record.known_keys),
            disclosed=set(record.disclosed), pending_peers=set(record.pending_peers),
            admission=set(record.admission), revocations=set(record.revocations),
            retired=dict(record.retired), issued=dict(record.issued),
            nonce_cache=NonceCache(), audit_log=[], proto=ProtocolState(),
        )
        world.trace.add(world.now, "compromise", ADVERSARY_ADDRESS, name, "", "", record.role.value)
        logging.warning(f"Adversary compromised {name} ({fingerprint(record.node_id)})")
        return self.stolen[name]

    # Passive side

    def intercept(self, world: "World", event: SimEvent) -> Optional[Envelope]:
        """
        Called for every delivery. Returns the envelope to deliver, possibly
        modified, or None to drop it.
        """
        env = event.envelope
        self.captured.append(Capture(world.now, event.source, event.target, event.label, env, not event.path))
        for rule in self.rules:
            if not rule.matches(event):
                continue
            rule.remaining -= 1
            if rule.action.kind == AdversaryKind.DROP:
                return None
            env = tamper(env, rule.action.field, rule.action.offset)
            self.tampered += 1
            world.trace.add(world.now, "tamper", event.source, event.target, event.label, env.trace_id,
                            rule.action.field)
        return env

    def open(self, world: "World", env: Envelope) -> Optional[bytes]:
        """Decrypt an envelope with a held key addressed by its digest, if any."""
        for name, keys in self.keys.items():
            if world.provider.hash(keys.public) != env.recipient_digest:
                continue
            try:
                plaintext = world.provider.decrypt(keys.private, env.ciphertext)
            except DecryptionFailure:
                continue
            assert world.provider.hash(keys.public) == env.recipient_digest
            return plaintext
        return None

    def eavesdrop(self, world: "World") -> list:
        """Try every captured envelope against the held keys."""
        opened = []
        seen = set()
        for capture in self.captured:
            env = capture.envelope
            if env.ciphertext in seen:
                continue
            seen.add(env.ciphertext)
            plaintext = self.open(world, env)
            if plaintext is None:
                continue
            owner = next((n for n, k in self.keys.items()
                          if world.provider.hash(k.public) == env.recipient_digest), "")
            recovery = Recovery(world.now, owner, capture.label, owner in self.identities)
            opened.append(recovery)
            self.recovered.append(recovery)
        world.trace.add(world.now, "eavesdrop", ADVERSARY_ADDRESS, "", "", "",
                        f"captured={len(seen)} opened={len(opened)}")
        return opened

    @property
    def recovered_foreign(self) -> list:
        """Plaintexts of honest nodes' traffic (only possible after a compromise)."""
        return [r for r in self.recovered if not r.own]

    # Active side

    def replay(self, world: "World", action: AdversaryAction) -> Optional[Capture]:
        candidates = [c for c in self.captured if c.final
                      and (not action.match or c.label == action.match)
                      and (not action.target or c.dst == action.target)]
        if action.occurrence >= len(candidates):
            logging.warning(f"Adversary has no captured {action.match or 'envelope'} #{action.occurrence} to replay")
            world.trace.add(world.now, "replay", ADVERSARY_ADDRESS, action.target, action.match, "", "nothing captured")
            return None
        capture = candidates[action.occurrence]
        world.trace.add(world.now, "replay", ADVERSARY_ADDRESS, capture.dst, capture.label,
                        capture.envelope.trace_id, f"from tick {capture.tick}")
        self.deliver(world, capture.dst, capture.envelope, capture.label)
        return capture

    def deliver(self, world: "World", destination: str, env: Envelope, label: str) -> SimEvent:
        return world.simulator.schedule_in(world.topology.hop_latency, EventKind.DELIVER, target=destination,
                                           source=ADVERSARY_ADDRESS, envelope=env, label=label)

    def forge(self, world: "World", template: str, signer: str, claim: str, target: NodeRecord,
              trace_id: str) -> Envelope:
        """
        Build a forged envelope to target.

        The inner signature is made with the signer's key while the sender
        digest names claim. Raises ModelViolation unless the signer's key
        is held.
        """
        provider = world.provider
        recipient_digest = provider.hash(target.public)
        if template == "raw":
            ciphertext = world.rng.randbytes(96)
            return Envelope(recipient_digest, ciphertext, EnvelopeKind.PLAIN, trace_id)

        keys = self.key_for(signer)
        claim_digest = provider.hash(self._public_of(world, claim or signer))
        msg_type = TEMPLATE_TYPES[template]
        body = self._forged_body(world, template, keys, claim_digest, target)
        payload = ControlPayload(msg_type, body, claim_digest, provider.new_nonce(world.rng), world.now, trace_id)
        inner = payload.to_bytes()
        signature = provider.sign(keys.private, inner)
        plaintext = encode([inner, signature.to_wire()])
        return Envelope(recipient_digest, provider.encrypt(target.public, plaintext, world.rng),
                        EnvelopeKind.SIGNED_CONTROL, trace_id)

    def _public_of(self, world: "World", name: str) -> PublicKey:
        if name in self.stolen:
            return self.stolen[name].public
        if name in self.keys:
            return self.keys[name].public
        return world.public_key_of(name)

    def _salted(self, world: "World", target: NodeRecord) -> bytes:
        known = any(s.tenant is not None and s.tenant == target.tenant for s in self.stolen.values())
        if known:
            return world.salted_hash(target.tenant, target.public)
        return world.provider.hash(target.public)

    def _forged_body(self, world: "World", template: str, keys: KeyPair, claim_digest: bytes,
                     target: NodeRecord) -> dict:
        provider = world.provider
        now = world.now
        nonce = provider.new_nonce(world.rng)
        scope = next((s.scope() for s in self.stolen.values() if s.keys == keys), "") or (
            tenant_scope(target.tenant) if target.tenant else "")

        def delegation(role: Role) -> DelegationCertificate:
            validity = world.validity()
            fields = DelegationCertificate.body(target.public, role, scope, validity, nonce, claim_digest)
            return DelegationCertificate(target.public, role, scope, validity, nonce, claim_digest,
                                         provider.sign(keys.private, encode(fields)))

        if template == "decision":
            h = provider.hash(world.rng.randbytes(32))
            signature = provider.sign(keys.private, DecisionRecord.body(h, Verdict.APPROVE, now, ""))
            record = DecisionRecord(h, Verdict.APPROVE, now, "", claim_digest, signature)
            return {"record": record.to_wire()}
        if template == "join_cert":
            return {"cert": delegation(Role.LEAF).to_wire(), "tenant": target.tenant or b"", "full_path": False,
                    "chain": [], "gateway": b""}
        if template == "upgrade_cert":
            upgrade = UpgradeCertificate(self._salted(world, target), Role.MANAGER, now, nonce, claim_digest, None)
            signed = replace(upgrade, signature=provider.sign(keys.private, encode(upgrade.body())))
            return {"upgrade": signed.to_wire(), "delegation": delegation(Role.MANAGER).to_wire(),
                    "chain": [], "full_path": False}
        if template == "key_rotation":
            return {"public": keys.public, "cert": delegation(target.role if target.role != Role.ROOT
                                                              else Role.MANAGER).to_wire()}
        if template == "chain_refresh":
            stolen = next((s for s in self.stolen.values() if s.keys == keys), None)
            chain = [stolen.cert.to_wire()] if stolen is not None and stolen.cert is not None else []
            return {"chain": chain}
        if template == "revocation":
            victim = provider.hash(target.parent) if target.parent else target.node_id
            fields = RevocationNotice.body(victim, now, RevocationReason.COMPROMISE, claim_digest)
            notice = RevocationNotice(victim, now, RevocationReason.COMPROMISE, claim_digest,
                                      provider.sign(keys.private, encode(fields)))
            return {"notice": notice.to_wire(), "digests": [victim], "direction": "down"}
        raise ScenarioError(f"unknown injection template {template!r}")

    def inject(self, world: "World", action: AdversaryAction) -> Envelope:
        target = world.node(action.target)
        trace_id = world.new_trace_id()
        env = self.forge(world, action.template, action.signer, action.claim, target, trace_id)
        self.injected += 1
        world.trace.add(world.now, "inject", ADVERSARY_ADDRESS, target.name, TEMPLATE_TYPES[action.template].value,
                        trace_id, action.template)
        self.deliver(world, target.name, env, TEMPLATE_TYPES[action.template].value)
        return env

    def spawn_sybils(self, world: "World", action: AdversaryAction) -> list:
        """
        Create count fresh identities that each ask the manager to join.

        The identities know the manager's key but were never invited, so
        the manager's admission check turns every one of them away.
        """
        manager = world.node(action.manager or action.target)
        spawned = []
        for _ in range(max(action.count, 0)):
            record = world.add_external(f"sybil-{len(self.sybils)}")
            self.adopt(record)
            self.sybils.append(record.name)
            record.known_keys.add(manager.public)
            record.disclosed.add(manager.public)
            initiate_join(world, record, manager.public)
            spawned.append(record)
        world.trace.add(world.now, "sybil", ADVERSARY_ADDRESS, manager.name, MsgType.JOIN_REQ.value, "",
                        f"count={len(spawned)}")
        return spawned

    def arm(self, world: "World", action: AdversaryAction) -> Rule:
        rule = Rule(action, max(action.count, 1))
        self.rules.append(rule)
        world.trace.add(world.now, "arm", ADVERSARY_ADDRESS, action.target, action.match, "", action.kind.value)
        return rule

    def perform(self, world: "World", action: AdversaryAction):
        """Execute one scripted action at the current tick."""
        if action.kind == AdversaryKind.EAVESDROP:
            return self.eavesdrop(world)
        if action.kind == AdversaryKind.REPLAY:
            return self.replay(world, action)
        if action.kind in (AdversaryKind.DROP, AdversaryKind.MODIFY):
            return self.arm(world, action)
        if action.kind == AdversaryKind.INJECT:
            return self.inject(world, action)
        if action.kind == AdversaryKind.SYBIL_SPAWN:
            return self.spawn_sybils(world, action)
        if action.kind == AdversaryKind.COMPROMISE:
            return self.compromise(world, action.target)
        raise ScenarioError(f"unsupported adversary action {action.kind}")


def tamper(env: Envelope, field_name: str, offset: int) -> Envelope:
    """Flip one byte (or the trace id's last bit) of an envelope."""
    if field_name == "trace_id":
        raw = bytearray(bytes.fromhex(env.trace_id))
        raw[-1] ^= 0x01
        return replace(env, trace_id=raw.hex())
    if field_name == "recipient":
        raw = bytearray(env.recipient_digest)
        raw[offset % len(raw)] ^= 0xFF
        return replace(env, recipient_digest=bytes(raw))
    raw = bytearray(env.ciphertext)
    if raw:
        raw[offset % len(raw)] ^= 0xFF
    return replace(env, ciphertext=bytes(raw))


def ensure_adversary(world: "World") -> Adversary:
    if world.adversary is None:
        world.adversary = Adversary()
    return world.adversary


def apply_adversary(world: "World", action: AdversaryAction) -> SimEvent:
    """
    Queue an adversary action for its tick.

    All downstream effects go through the normal delivery path and
    protocol handlers. Actions that need a key the adversary does not hold
    fail with ModelViolation when they run.
    """
    adversary = ensure_adversary(world)
    return world.at(action.at, lambda: adversary.perform(world, action), label=f"adversary {action.kind.value}")


# Containment and locality


@dataclass
class ContainmentReport:
    victim: str
    subtree: list
    attempts: int = 0
    accepted_by: list = field(default_factory=list)
    accepted_live: list = field(default_factory=list)
    changed: list = field(default_factory=list)
    outside: list = field(default_factory=list)
    issued_outside: list = field(default_factory=list)

    @property
    def accepted_outside(self) -> list:
        return [name for name in self.accepted_by if name not in self.subtree]

    @property
    def ok(self) -> bool:
        return not self.outside and not self.issued_outside and not self.accepted_outside

    def render(self) -> str:
        lines = [
            f"victim: {self.victim}",
            f"subtree: {', '.join(self.subtree)}",
            f"attempts: {self.attempts}",
            f"accepted by: {', '.join(self.accepted_by) or '-'} (live: {', '.join(self.accepted_live) or '-'})",
            f"changed: {', '.join(self.changed) or '-'}",
            f"changed outside subtree: {', '.join(self.outside) or '-'}",
            f"issued outside subtree: {len(self.issued_outside)}",
            f"contained: {'yes' if self.ok else 'NO'}",
        ]
        return "\n".join(lines)


def _subtree_names(world: "World", record: NodeRecord) -> list:
    if record.tenant is None:
        return [record.name]
    return [r.name for r in world.view(record.tenant).subtree(record)]


def _states(world: "World", include_revocations: bool = True) -> dict:
    return {name: r.snapshot(include_revocations) for name, r in world.nodes.items()}


def compromise_containment_check(world: "World", victim_name: str) -> ContainmentReport:
    """
    Try every authority-bearing forgery the victim's stolen key allows
    against every other node, run to quiescence, and diff the world.

    A victim not yet compromised is compromised first.

    Returns:
        ContainmentReport: contained when nothing outside subtree(victim)
        changed, accepted the forgeries or issued anything
    """
    adversary = ensure_adversary(world)
    if victim_name not in adversary.stolen:
        logging.warning(f"{victim_name} was not compromised before the containment check; compromising now")
        adversary.compromise(world, victim_name)
    stolen = adversary.stolen[victim_name]
    victim = world.node(victim_name)
    report = ContainmentReport(victim_name, _subtree_names(world, victim))

    before = _states(world)
    issued_mark = len(world.issued)
    accept_mark = len(world.acceptances)
    trace_id = world.new_trace_id()
    world.trace.add(world.now, "containment", ADVERSARY_ADDRESS, victim_name, "", trace_id,
                    f"subtree={len(report.subtree)}")

    targets = [r for name, r in sorted(world.nodes.items())
               if name != victim_name and name not in adversary.identities]
    for target in targets:
        for template in AUTHORITY_TEMPLATES:
            env = adversary.forge(world, template, victim_name, victim_name, target, trace_id)
            adversary.deliver(world, target.name, env, TEMPLATE_TYPES[template].value)
            report.attempts += 1
    world.run()

    after = _states(world)
    report.changed = sorted(name for name in after if before.get(name) != after[name])
    report.outside = [name for name in report.changed if name not in report.subtree]
    report.issued_outside = [r for r in world.issued[issued_mark:] if r.issuer not in report.subtree]
    accepted = {a.recipient for a in world.acceptances[accept_mark:] if a.sender_digest == stolen.node_id}
    report.accepted_by = sorted(accepted)
    report.accepted_live = [name for name in report.accepted_by if not world.node(name).revoked]
    logging.info(f"Containment check for {victim_name}: {report.attempts} attempts, "
                 f"{len(report.accepted_by)} acceptor(s), contained={report.ok}")
    return report


@dataclass
class LocalityReport:
    operation: str
    anchor: str
    allowed: list
    changed: list = field(default_factory=list)
    outside: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.outside

    def render(self) -> str:
        return (f"{self.operation} at {self.anchor}: changed {', '.join(self.changed) or '-'}; "
                f"outside {', '.join(self.outside) or '-'}")


def locality_check(world: "World", anchor_name: str, operation: Callable[[], object], label: str = "operation",
                   also: Iterable[str] = ()) -> LocalityReport:
    """
    Run an operation to quiescence and report nodes changed outside
    subtree(anchor) plus the names in also. Revocation sets are left out
    of the comparison: a Compromise notice reaches every member.
    """
    anchor = world.node(anchor_name)
    allowed = _subtree_names(world, anchor) + [n for n in also if n]
    before = _states(world, include_revocations=False)
    operation()
    world.run()
    after = _states(world, include_revocations=False)
    report = LocalityReport(label, anchor_name, allowed)
    report.changed = sorted(name for name in after if before.get(name) != after[name])
    report.outside = [name for name in report.changed if name not in allowed]
    logging.info(f"Locality check: {report.render()}")
    return report


def revocation_locality(world: "World", manager_name: str, subject_name: str,
                        reason: RevocationReason = RevocationReason.TERMINATION) -> LocalityReport:
    manager = world.node(manager_name)
    subject = world.node(subject_name)
    return locality_check(world, manager_name, lambda: revoke_member(world, manager, subject, reason),
                          f"revoke {subject_name}")


def rotation_locality(world: "World", manager_name: str) -> LocalityReport:
    """Rotation may also touch the manager's parent and, for a root, the gateway."""
    manager = world.node(manager_name)
    parent = world.parent_of(manager)
    tenant = world.tenant_of(manager)
    also = [parent.name if parent else "", tenant.gateway if tenant and tenant.gateway else ""]
    return locality_check(world, manager_name, lambda: rotate_member_keys(world, manager),
                          f"rotate {manager_name}", also)


# Privacy scans


def wire_scan(world: "World") -> list:
    """Raw member or storage keys appearing in clear in any wire record."""
    keys = {r.public: r.name for r in world.nodes.values()}
    keys.update({s.keys.public: s.name for s in world.storage.values()})
    leaks = []
    for wire in world.wire:
        raw = wire.to_bytes()
        for pk, name in keys.items():
            if pk in raw:
                leaks.append(f"key of {name} in clear on {wire.src} -> {wire.dst} at tick {wire.tick}")
    return leaks


def storage_exposure(world: "World") -> list:
    """Raw identity keys or node ids of tenant members found in anything a storage node decrypted."""
    members = [r for r in world.nodes.values() if r.tenant is not None and not r.is_gateway]
    exposures = []
    for store in world.storage.values():
        for plaintext in store.observed:
            for r in members:
                if r.public in plaintext:
                    exposures.append(f"storage {store.name} saw the key of {r.name}")
                if r.node_id in plaintext:
                    exposures.append(f"storage {store.name} saw the node id of {r.name}")
    return exposures
