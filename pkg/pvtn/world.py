"""
World Module for PVTN

The simulation state of one run: every node of every tenant, storage
nodes, the tenant registry, the overlay and the event loop. The World:
- builds tenants and bootstrap trees (create_tenant, add_member, add_external)
- records out-of-band trust events (invite, disclose)
- seals, routes and delivers envelopes (send, post)
- dispatches delivered payloads to protocol handlers
- checks the tree and key-visibility invariants after every event

Protocol modules register their message handlers through install().
"""

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import config
from pvtn import action_protocol, gateway, join_protocol, lifecycle, upgrade_protocol
from pvtn.crypto import CryptoProvider, KeyPair, PublicKey, fingerprint
from pvtn.errors import (
    DeliveryFailed,
    InvariantViolation,
    MalformedPayload,
    PvtnError,
    ReplayRejected,
    ScenarioError,
    SignatureInvalid,
)
from pvtn.messaging import (
    ControlPayload,
    Envelope,
    EnvelopeKind,
    MsgType,
    addressable_keys,
    make_payload,
    seal,
    unseal,
)
from pvtn.overlay import EventKind, OverlayNode, RouteMode, SimEvent, Simulator, Topology, route
from pvtn.tenancy import Policy, TenantRecord, TenantRegistry
from pvtn.tree import (
    DelegationMode,
    NodeRecord,
    Role,
    TreeView,
    Validity,
    attach_child,
    create_root,
    issue_delegation,
    new_node,
    scope_label,
    tree_problems,
    visibility_violations,
)

Handler = Callable[["World", NodeRecord, ControlPayload, Envelope], None]


@dataclass
class Settings:
    """Run parameters; defaults come from config.py."""

    max_ticks: int = config.MAX_TICKS
    decision_skew: int = config.DECISION_SKEW
    nonce_capacity: int = config.NONCE_CACHE
    fanout: int = config.OVERLAY_FANOUT
    cert_validity: int = config.CERT_VALIDITY
    action_ttl: int = config.ACTION_TTL
    aggregation_factor: int = config.AGGREGATION_FACTOR
    hop_latency: int = 1
    check_invariants: bool = True


@dataclass(frozen=True)
class HandlerRoute:
    handler: Handler
    signed: bool = True
    accept_revoked: bool = False


@dataclass(frozen=True)
class WireRecord:
    tick: int
    src: str
    dst: str
    envelope: Envelope

    def to_bytes(self) -> bytes:
        return self.envelope.to_wire()


@dataclass(frozen=True)
class IssueRecord:
    kind: str
    tenant: Optional[bytes]
    issuer: str
    issuer_digest: bytes
    subject_digest: bytes
    nonce: bytes
    tick: int


@dataclass(frozen=True)
class Acceptance:
    tick: int
    recipient: str
    sender_digest: bytes
    msg_type: str


@dataclass
class Outcome:
    protocol: str
    subject: str
    status: str = "pending"
    reason: str = ""
    detail: dict = field(default_factory=dict)


class World:
    """
    All state of one simulation run.

    Node addresses on the overlay are node names. A key digest may belong
    to several records (the same key pair present in two tenants, or an
    impersonator); locate() resolves a digest from the sender's viewpoint.
    """

    def __init__(self, provider: CryptoProvider, seed: int = 0, settings: Optional[Settings] = None):
        self.provider = provider
        self.seed = seed
        self.rng = random.Random(seed)
        self.settings = settings or Settings()
        self.simulator = Simulator(self._dispatch, self.settings.max_ticks)
        self.trace = self.simulator.trace
        self.nodes: dict = {}
        self.storage: dict = {}
        self.tenancy = TenantRegistry()
        self.latency: dict = {}
        self.topology = Topology(self._overlay_node, self._addresses, self.settings.fanout,
                                 self.latency, self.settings.hop_latency)
        self.wire: list = []
        self.adversary = None
        self.routes: dict = {}
        self.issued: list = []
        self.issued_nonces: set = set()
        self.outcomes: dict = {}
        self.acceptances: list = []
        self.invariant_failures: list = []
        self._raised = 0
        for module in (join_protocol, upgrade_protocol, action_protocol, gateway, lifecycle):
            module.install(self)

    @property
    def now(self) -> int:
        return self.simulator.now

    # Construction

    def new_trace_id(self) -> str:
        return self.rng.randbytes(8).hex()

    def _register(self, record: NodeRecord) -> NodeRecord:
        if record.name in self.nodes or record.name in self.storage:
            raise ScenarioError(f"duplicate node name '{record.name}'")
        self.nodes[record.name] = record
        return record

    def create_tenant(self, name: str, root_name: Optional[str] = None,
                      mode: DelegationMode = DelegationMode.HIERARCHICAL_ONLY,
                      policy: Optional[Policy] = None, keys: Optional[KeyPair] = None) -> TenantRecord:
        root = create_root(self.provider, self.rng, root_name or f"{name}-root", keys,
                           self.settings.nonce_capacity)
        if mode == DelegationMode.FULL_PATH:
            root.cert_chain = []
        self._register(root)
        tenant = TenantRecord(name=name, tenant_id=root.tenant, root_name=root.name,
                              salt=self.rng.randbytes(16), mode=mode, policy=policy or Policy())
        self.tenancy.add(tenant)
        self.trace.add(self.now, "setup", root.name, "", "", "", f"tenant={name} mode={mode.value}")
        return tenant

    def add_member(self, tenant_name: str, name: str, parent_name: str, role: Role = Role.LEAF,
                   permission: Optional[str] = None, keys: Optional[KeyPair] = None) -> NodeRecord:
        """Bootstrap a member directly under a parent (fixture construction)."""
        tenant = self.tenant(tenant_name)
        parent = self.node(parent_name)
        child = new_node(self.provider, self.rng, name, keys, self.settings.nonce_capacity)
        scope = scope_label(tenant.tenant_id, permission) if permission else parent.scope()
        cert = issue_delegation(self.provider, parent, child.public, role, scope,
                                self.validity(), self.provider.new_nonce(self.rng))
        prefix = parent.cert_chain if tenant.mode == DelegationMode.FULL_PATH else None
        attach_child(child, parent.public, tenant.tenant_id, cert, prefix)
        self._register(child)
        self.adopt_gateway(child)
        self.record_issue("delegation", parent, child.node_id, cert.nonce)
        self.trace.add(self.now, "setup", parent.name, child.name, "", "", f"role={role.value}")
        return child

    def add_external(self, name: str, keys: Optional[KeyPair] = None) -> NodeRecord:
        """A node on the overlay outside every tenant: candidate, validator, gateway or attacker."""
        record = new_node(self.provider, self.rng, name, keys, self.settings.nonce_capacity)
        return self._register(record)

    def set_gateway(self, tenant_name: str, gateway_name: str) -> None:
        """Designate a gateway; it receives a routing handle into the tenant root."""
        tenant = self.tenant(tenant_name)
        gw = self.node(gateway_name)
        gw.is_gateway = True
        tenant.gateway = gw.name
        root = self.node(tenant.root_name)
        if gw is not root:
            gw.known_keys.add(root.public)
            gw.disclosed.add(root.public)
        for member in self.members(tenant.tenant_id, include_revoked=True):
            if member is not gw:
                member.gateway_pk = gw.public
        self.trace.add(self.now, "trust", gw.name, root.name, "", "", "gateway")

    def adopt_gateway(self, record: NodeRecord) -> None:
        tenant = self.tenancy.get(record.tenant)
        if tenant is not None and tenant.gateway and tenant.gateway != record.name:
            record.gateway_pk = self.node(tenant.gateway).public

    def add_storage(self, name: str, gateway_name: str) -> "gateway.StorageNode":
        gw = self.node(gateway_name)
        if name in self.nodes or name in self.storage:
            raise ScenarioError(f"duplicate node name '{name}'")
        keys = self.provider.generate_keypair(self.rng)
        store = gateway.StorageNode(name=name, keys=keys, node_id=self.provider.hash(keys.public),
                                    gateway_pk=gw.public, known_keys={gw.public})
        self.storage[name] = store
        gw.known_keys.add(keys.public)
        gw.disclosed.add(keys.public)
        self.trace.add(self.now, "setup", gw.name, name, "", "", "storage")
        return store

    def set_latency(self, a: str, b: str, ticks: int) -> None:
        self.latency[frozenset((a, b))] = ticks

    def validity(self, ticks: Optional[int] = None) -> Validity:
        return Validity(self.now, self.now + (ticks if ticks is not None else self.settings.cert_validity))

    # Out-of-band trust events

    def invite(self, manager_name: str, candidate_name: str) -> None:
        """Disclose a manager's key to a prospective member and admit its key."""
        manager = self.node(manager_name)
        candidate = self.node(candidate_name)
        candidate.known_keys.add(manager.public)
        candidate.disclosed.add(manager.public)
        manager.admission.add(candidate.node_id)
        manager.audit(self.now, "invite", candidate.name)
        self.trace.add(self.now, "trust", manager.name, candidate.name, "", "", "invite")

    def disclose(self, receiver_name: str, owner_name: str) -> None:
        """Copy one public key into one node's known keys."""
        receiver = self.node(receiver_name)
        owner_pk = self.public_key_of(owner_name)
        receiver.known_keys.add(owner_pk)
        receiver.disclosed.add(owner_pk)
        self.trace.add(self.now, "trust", owner_name, receiver.name, "", "", "disclose")

    # Lookup

    def node(self, name: str) -> NodeRecord:
        record = self.nodes.get(name)
        if record is None:
            raise ScenarioError(f"unknown node '{name}'")
        return record

    def public_key_of(self, name: str) -> PublicKey:
        if name in self.storage:
            return self.storage[name].keys.public
        return self.node(name).public

    def tenant(self, name: str) -> TenantRecord:
        tenant = self.tenancy.named(name)
        if tenant is None:
            raise ScenarioError(f"unknown tenant '{name}'")
        return tenant

    def tenant_of(self, record: NodeRecord) -> Optional[TenantRecord]:
        return self.tenancy.get(record.tenant)

    def members(self, tenant_id: bytes, include_revoked: bool = True) -> list:
        return [r for r in self.nodes.values()
                if r.tenant == tenant_id and (include_revoked or not r.revoked)]

    def view(self, tenant_id: bytes) -> TreeView:
        return TreeView(self.provider, self.members(tenant_id))

    def depth_of(self, record: NodeRecord) -> int:
        return self.view(record.tenant).depth(record) if record.tenant else 0

    def parent_of(self, record: NodeRecord) -> Optional[NodeRecord]:
        if record.parent is None:
            return None
        return self.view(record.tenant).record(record.parent)

    def salted_hash(self, tenant_id: bytes, pk: PublicKey) -> bytes:
        tenant = self.tenancy.get(tenant_id)
        salt = tenant.salt if tenant else b""
        return self.provider.hash(salt + pk)

    def policy_for(self, record: NodeRecord) -> Policy:
        tenant = self.tenant_of(record)
        return tenant.policy_for(record.name) if tenant else Policy()

    def knows(self, record: NodeRecord, pk: PublicKey) -> bool:
        if pk in addressable_keys(record):
            return True
        candidate = record.proto.candidate
        return candidate is not None and candidate.manager_pk == pk

    def locate(self, sender: Optional[NodeRecord], digest: bytes):
        """Resolve a recipient digest to a node or storage record."""
        for store in self.storage.values():
            if store.node_id == digest:
                return store
        matches = [r for r in self.nodes.values() if r.node_id == digest]
        if len(matches) <= 1:
            return matches[0] if matches else None
        if sender is not None:
            adjacent = [r for r in matches if self.knows(r, sender.public)]
            if adjacent:
                matches = adjacent
        live = [r for r in matches if not r.revoked]
        return (live or matches)[0]

    def _addresses(self) -> list:
        return list(self.nodes) + list(self.storage)

    def _overlay_node(self, address: str) -> Optional[OverlayNode]:
        record = self.nodes.get(address)
        if record is None:
            store = self.storage.get(address)
            if store is None:
                return None
            gw = next((r.name for r in self.nodes.values() if r.public == store.gateway_pk), None)
            return OverlayNode(address, store.node_id, 2, None, gw)
        if record.role == Role.ROOT or record.is_gateway:
            layer = 0
        elif record.role == Role.MANAGER:
            layer = 1
        else:
            layer = 2
        parent = self.parent_of(record)
        tenant = self.tenant_of(record)
        return OverlayNode(address, record.node_id, layer,
                           parent.name if parent else None, tenant.gateway if tenant else None)

    # Sending

    def send(self, sender: NodeRecord, recipient_pk: PublicKey, msg_type: MsgType, body: dict,
             trace_id: str, signed: bool = True, mode: RouteMode = RouteMode.DIRECT_IP,
             nonce: Optional[bytes] = None) -> Envelope:
        """Seal a payload to recipient_pk and put it on the overlay."""
        payload = make_payload(self.provider, self.rng, sender, msg_type, body, self.now, trace_id, nonce)
        env = seal(self.provider, self.rng, sender, recipient_pk, payload, signed)
        target = self.locate(sender, env.recipient_digest)
        self.post(sender.name, target.name if target else "", env, msg_type.value, mode)
        return env

    def post(self, source: str, destination: str, env: Envelope, label: str,
             mode: RouteMode = RouteMode.DIRECT_IP, delay: int = 0) -> None:
        self.trace.add(self.now, "send", source, destination, label, env.trace_id, mode.value)
        try:
            path = route(env, mode, self.topology, source, destination)
        except DeliveryFailed as e:
            timeout = 4 * self.topology.max_latency()
            self.simulator.schedule_in(timeout, EventKind.TIMEOUT, target=destination, source=source,
                                       label=label, action=lambda: self._delivery_failed(source, destination,
                                                                                         label, env, str(e)))
            return
        self._hop(source, path, env, label, delay)

    def _hop(self, source: str, path: list, env: Envelope, label: str, delay: int = 0) -> None:
        nxt = path[0]
        self.simulator.schedule_in(self.topology.link_latency(source, nxt) + delay, EventKind.DELIVER,
                                   target=nxt, source=source, envelope=env, path=tuple(path[1:]), label=label)

    def _delivery_failed(self, source: str, destination: str, label: str, env: Envelope, reason: str) -> None:
        self.trace.add(self.now, "drop", source, destination or "-", label, env.trace_id, "DeliveryFailed")
        logging.warning(f"Delivery from {source} failed: {reason}")

    # Timers and script hooks

    def after(self, delay: int, action: Callable[[], None], label: str = "", node: str = "") -> SimEvent:
        return self.simulator.schedule_in(delay, EventKind.TIMEOUT, target=node, label=label, action=action)

    def at(self, tick: int, action: Callable[[], None], label: str = "") -> SimEvent:
        return self.simulator.schedule(tick, EventKind.INJECT, label=label, action=action)

    def run(self, max_ticks: Optional[int] = None):
        return self.simulator.run_until_quiescent(max_ticks)

    # Dispatch

    def on(self, msg_type: MsgType, handler: Handler, signed: bool = True, accept_revoked: bool = False) -> None:
        self.routes[msg_type] = HandlerRoute(handler, signed, accept_revoked)

    def _dispatch(self, event: SimEvent) -> None:
        if event.kind == EventKind.DELIVER:
            self._deliver(event)
        elif event.action is not None:
            if event.label:
                kind = "timeout" if event.kind == EventKind.TIMEOUT else "script"
                self.trace.add(self.now, kind, event.target, "", "", "", event.label)
            try:
                event.action()
            except PvtnError as e:
                self.trace.add(self.now, "reject", event.target, "", "", "", type(e).__name__)
                logging.warning(f"{event.label or 'scheduled action'} failed: {type(e).__name__}: {e}")
        if self.settings.check_invariants:
            self.assert_invariants()

    def _deliver(self, event: SimEvent) -> None:
        env = event.envelope
        self.wire.append(WireRecord(self.now, event.source, event.target, env))
        if self.adversary is not None:
            env = self.adversary.intercept(self, event)
            if env is None:
                self.trace.add(self.now, "drop", event.source, event.target, event.label, event.envelope.trace_id,
                               "adversary")
                return
        if event.path:
            self.trace.add(self.now, "relay", event.source, event.target, event.label, env.trace_id)
            self._hop(event.target, list(event.path), env, event.label)
            return

        self.trace.add(self.now, "deliver", event.source, event.target, event.label, env.trace_id)
        store = self.storage.get(event.target)
        recipient = self.nodes.get(event.target)
        if store is None and recipient is None:
            self.trace.add(self.now, "drop", event.source, event.target, event.label, env.trace_id, "DeliveryFailed")
            return
        try:
            if store is not None:
                gateway.handle_storage_envelope(self, store, env, event.source)
            elif env.recipient_digest != recipient.node_id and gateway.session_of(recipient, env.recipient_digest):
                gateway.handle_session_envelope(self, recipient, env)
            else:
                self.receive(recipient, env)
        except PvtnError as e:
            self.reject(event.source, event.target, event.label, env.trace_id, e)

    def reject(self, source: str, target: str, label: str, trace_id: str, error: Exception) -> None:
        self.trace.add(self.now, "reject", source, target, label, trace_id, type(error).__name__)
        logging.warning(f"{target} rejected {label or 'message'} from {source}: {type(error).__name__}: {error}")

    def receive(self, recipient: NodeRecord, env: Envelope) -> ControlPayload:
        """Unseal, apply the generic checks and run the registered handler."""
        payload = unseal(self.provider, recipient, env)
        handler_route = self.routes.get(payload.msg_type)
        if handler_route is None:
            raise SignatureInvalid(f"no handler for {payload.msg_type.value}")
        if handler_route.signed and env.kind != EnvelopeKind.SIGNED_CONTROL:
            raise SignatureInvalid(f"{payload.msg_type.value} must be signed")
        if payload.sender_digest in recipient.revocations and not handler_route.accept_revoked:
            raise SignatureInvalid(f"{payload.msg_type.value} from a revoked signer")
        if payload.nonce in recipient.nonce_cache:
            raise ReplayRejected(f"nonce already seen by {recipient.name}")
        recipient.nonce_cache.add(payload.nonce)
        try:
            handler_route.handler(self, recipient, payload, env)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedPayload(f"{payload.msg_type.value} body rejected by {recipient.name}: {e!r}") from e
        self.acceptances.append(Acceptance(self.now, recipient.name, payload.sender_digest, payload.msg_type.value))
        return payload

    # Bookkeeping

    def record_issue(self, kind: str, issuer: NodeRecord, subject_digest: bytes, nonce: bytes) -> IssueRecord:
        record = IssueRecord(kind, issuer.tenant, issuer.name, issuer.node_id, subject_digest, nonce, self.now)
        self.issued.append(record)
        self.trace.add(self.now, "issue", issuer.name, "", kind, "", fingerprint(subject_digest))
        return record

    def outcome(self, trace_id: str, protocol: str, subject: str) -> Outcome:
        if trace_id not in self.outcomes:
            self.outcomes[trace_id] = Outcome(protocol, subject)
        return self.outcomes[trace_id]

    def outcomes_for(self, protocol: str, subject: Optional[str] = None) -> list:
        return [o for o in self.outcomes.values()
                if o.protocol == protocol and (subject is None or o.subject == subject)]

    def flag_invariant(self, problem: str) -> None:
        self.invariant_failures.append(problem)
        self.trace.add(self.now, "invariant", "", "", "", "", problem)
        logging.error(f"Invariant violated: {problem}")

    def check_invariants(self) -> list:
        """Tree, uniqueness and key-visibility checks over the whole world."""
        problems = []
        for tenant in self.tenancy.all():
            problems.extend(f"{tenant.name}: {p}" for p in tree_problems(self.view(tenant.tenant_id)))
        for record in self.nodes.values():
            extra = visibility_violations(record)
            if extra:
                problems.append(f"{record.name} holds {len(extra)} key(s) outside its neighbourhood")
        for store in self.storage.values():
            if store.known_keys != {store.gateway_pk}:
                problems.append(f"storage {store.name} knows keys other than its gateway")
        return problems

    def assert_invariants(self) -> None:
        """Raise InvariantViolation for any problem not raised before."""
        for problem in self.check_invariants():
            if problem not in self.invariant_failures:
                self.flag_invariant(problem)
        if len(self.invariant_failures) > self._raised:
            fresh = self.invariant_failures[self._raised:]
            self._raised = len(self.invariant_failures)
            raise InvariantViolation("; ".join(fresh))

    # Snapshot

    def snapshot(self) -> dict:
        """Public state of the world, JSON-friendly."""
        tenants = []
        for tenant in self.tenancy.all():
            view = self.view(tenant.tenant_id)
            nodes = []
            for record in self.members(tenant.tenant_id):
                nodes.append({
                    "name": record.name,
                    "digest": record.node_id.hex(),
                    "public": record.public.hex(),
                    "role": record.role.value,
                    "parent": self.provider.hash(record.parent).hex() if record.parent else None,
                    "revoked": record.revoked,
                    "known_keys": sorted(self.provider.hash(k).hex() for k in record.known_keys),
                    "disclosed": sorted(self.provider.hash(k).hex() for k in record.disclosed),
                    "chain": [_hexify(c.to_wire()) for c in view.chain_of(record)],
                })
            tenants.append({
                "name": tenant.name,
                "tenant_id": tenant.tenant_id.hex(),
                "mode": tenant.mode.value,
                "gateway": tenant.gateway,
                "root": view.root.public.hex() if view.root else None,
                "nodes": nodes,
            })
        externals = [{
            "name": r.name,
            "digest": r.node_id.hex(),
            "public": r.public.hex(),
            "known_keys": sorted(self.provider.hash(k).hex() for k in r.known_keys),
            "disclosed": sorted(self.provider.hash(k).hex() for k in r.disclosed),
        } for r in self.nodes.values() if r.tenant is None]
        return {
            "seed": self.seed,
            "provider": self.provider.name,
            "tick": self.now,
            "tenants": tenants,
            "externals": externals,
            "bridges": [_hexify(b.to_wire()) for b in self.tenancy.bridges],
        }


def _hexify(value):
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return {k: _hexify(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_hexify(v) for v in value]
    return value
