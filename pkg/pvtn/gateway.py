"""
Gateway Module for PVTN

Gateway-mediated hierarchical verification:
- a validator X, or a storage node, hands a certificate to the tenant's
  gateway, the only PVTN key it holds
- the gateway routes the request into the tenant root; each layer runs
  action_protocol.verify_layer on the way down to the issuer P0
- P0 answers with a challenge for N (sealed to PK_N, signed by P0) and a
  copy for the gateway; signed approval flags travel back up
- the gateway signs a GatewayProof (or a denial) for the requester
- storage grants access only when N returns the challenge value, which
  proves N holds its private key

The storage node talks to the requester through a per-session ephemeral
key, so its known keys stay exactly {gateway}.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

from pvtn.action_protocol import (
    ActionCertificate,
    GatewayProof,
    commit,
    is_issuer,
    verify_layer,
)
from pvtn.codec import decode, encode
from pvtn.crypto import Digest, KeyPair, PublicKey, Signature, fingerprint
from pvtn.errors import (
    DecisionMismatch,
    DecryptionFailure,
    KeyNotVisible,
    NotAuthorized,
    ReplayRejected,
    SignatureInvalid,
)
from pvtn.messaging import (
    ControlPayload,
    Envelope,
    EnvelopeKind,
    MsgType,
    make_payload,
    seal,
    sign_fields,
    unseal,
    verify_fields,
)
from pvtn.tree import AuditEntry, NodeRecord, NonceCache, Role, Validity, new_node

if TYPE_CHECKING:
    from pvtn.world import World


@dataclass(eq=False)
class StorageNode:
    """A resource that trusts the gateway's signature and nothing else."""

    name: str
    keys: KeyPair
    node_id: Digest
    gateway_pk: PublicKey
    known_keys: set = field(default_factory=set)
    pending_peers: set = field(default_factory=set)
    nonce_cache: NonceCache = field(default_factory=NonceCache)
    sessions: dict = field(default_factory=dict)
    used_nonces: set = field(default_factory=set)
    granted: set = field(default_factory=set)
    audit_log: list = field(default_factory=list)
    observed: list = field(default_factory=list)

    @property
    def public(self) -> PublicKey:
        return self.keys.public

    def audit(self, tick: int, event: str, detail: str = "") -> None:
        self.audit_log.append(AuditEntry(tick, event, detail))


@dataclass(frozen=True)
class AccessCertificate:
    """
    Cert_{m->c} as presented to storage.

    commitment hides the child: H(H(ID_N) || proposal nonce). Only P0,
    which knows its child, can open it. cert_hash binds the action
    certificate, which travels sealed to the gateway and is never readable
    by storage.
    """

    commitment: Digest
    permissions: str
    nonce: bytes
    validity: Validity
    cert_hash: Digest

    def to_wire(self) -> dict:
        return {"commitment": self.commitment, "permissions": self.permissions, "nonce": self.nonce,
                "validity": self.validity.to_wire(), "cert": self.cert_hash}

    @classmethod
    def from_wire(cls, data: dict) -> "AccessCertificate":
        return cls(bytes(data["commitment"]), str(data["permissions"]), bytes(data["nonce"]),
                   Validity.from_wire(data["validity"]), bytes(data["cert"]))


@dataclass(frozen=True)
class Challenge:
    """P0's random value, sealed to PK_N and signed by P0 over the ciphertext."""

    sealed: bytes
    signature: Signature
    trace_id: str

    def to_body(self) -> dict:
        return {"sealed": self.sealed, "signature": self.signature.to_wire()}


@dataclass(frozen=True)
class ApprovalFlag:
    layer_digest: Digest
    valid: bool
    reason: str
    cert_hash: Digest
    signature: Optional[Signature] = None

    def body(self) -> dict:
        return {"layer": self.layer_digest, "valid": self.valid, "reason": self.reason, "cert": self.cert_hash}

    @classmethod
    def create(cls, world: "World", node: NodeRecord, valid: bool, reason: str, cert_hash: Digest) -> "ApprovalFlag":
        draft = cls(node.node_id, valid, reason, cert_hash)
        return cls(node.node_id, valid, reason, cert_hash, sign_fields(world.provider, node, draft.body()))

    def verify(self, world: "World", pk: PublicKey) -> bool:
        return verify_fields(world.provider, pk, self.layer_digest, self.body(), self.signature)

    def to_wire(self) -> dict:
        return {**self.body(), "signature": self.signature.to_wire()}

    @classmethod
    def from_wire(cls, data: dict) -> "ApprovalFlag":
        return cls(bytes(data["layer"]), bool(data["valid"]), str(data["reason"]), bytes(data["cert"]),
                   Signature.from_wire(data["signature"]))


@dataclass
class GatewaySession:
    trace_id: str
    cert: ActionCertificate
    reply_pk: PublicKey
    root_pk: Optional[PublicKey]
    storage_id: bytes = b""
    commitment: Optional[bytes] = None


@dataclass
class MemberValidation:
    cert_hash: Digest
    child_pk: PublicKey


@dataclass
class StorageSession:
    trace_id: str
    access: AccessCertificate
    reply_pk: PublicKey
    reply_address: str
    status: str = "forwarded"
    proof: Optional[GatewayProof] = None
    timer: object = None


@dataclass
class ClientSession:
    """Requester side of a storage session; endpoint holds the ephemeral key."""

    endpoint: NodeRecord
    storage_pk: PublicKey
    storage_name: str
    status: str = "open"
    reason: str = ""


def _post_plain(world: "World", sender, source: str, destination: str, recipient_pk: PublicKey,
                msg_type: MsgType, body: dict, trace_id: str) -> Envelope:
    payload = make_payload(world.provider, world.rng, sender, msg_type, body, world.now, trace_id)
    env = seal(world.provider, world.rng, sender, recipient_pk, payload, signed=False)
    world.post(source, destination, env, msg_type.value)
    return env


# Requester side

def open_session(world: "World", child: NodeRecord, storage_name: str) -> tuple:
    """
    Create a storage session with a fresh ephemeral endpoint.

    Returns:
        tuple: (trace id, ClientSession)
    """
    trace_id = world.new_trace_id()
    storage_pk = world.public_key_of(storage_name)
    endpoint = new_node(world.provider, world.rng, f"{child.name}/session")
    if storage_pk in child.known_keys:
        endpoint.known_keys.add(storage_pk)
    session = ClientSession(endpoint, storage_pk, storage_name)
    child.proto.validations[trace_id] = session
    world.outcome(trace_id, "storage", child.name)
    return trace_id, session


def submit_access(world: "World", child: NodeRecord, trace_id: str, access_wire, sealed_cert: bytes = b"") -> Envelope:
    """Send an access certificate (wire form, possibly malformed) and the gateway's sealed copy to storage."""
    session = child.proto.validations[trace_id]
    body = {"access": access_wire, "sealed": sealed_cert, "reply": session.endpoint.public}
    child.audit(world.now, "storage_request", session.storage_name)
    return _post_plain(world, session.endpoint, child.name, session.storage_name, session.storage_pk,
                       MsgType.STORAGE_REQUEST, body, trace_id)


def make_access(world: "World", cert: ActionCertificate) -> AccessCertificate:
    provider = world.provider
    return AccessCertificate(commit(provider, cert.proposal), cert.proposal.scope, provider.new_nonce(world.rng),
                             world.validity(world.settings.action_ttl), cert.digest(provider))


def seal_for_gateway(world: "World", child: NodeRecord, cert: ActionCertificate) -> bytes:
    """
    Encrypt the action certificate to the tenant gateway.

    Raises:
        KeyNotVisible: the child's tenant has no gateway
    """
    if child.gateway_pk is None:
        raise KeyNotVisible(f"{child.name} holds no gateway key")
    return world.provider.encrypt(child.gateway_pk, encode(cert.to_wire()), world.rng)


def open_sealed_cert(world: "World", gw: NodeRecord, sealed: bytes) -> ActionCertificate:
    """Gateway side of seal_for_gateway."""
    try:
        return ActionCertificate.from_wire(decode(world.provider.decrypt(gw.keys.private, sealed)))
    except (DecryptionFailure, KeyError, TypeError, ValueError) as e:
        raise NotAuthorized(f"sealed certificate unreadable at {gw.name}: {type(e).__name__}") from e


def storage_request(world: "World", child: NodeRecord, storage_name: str, cert: ActionCertificate,
                    access: Optional[AccessCertificate] = None) -> str:
    """
    Child -> Storage: present an access certificate.

    Returns:
        str: session trace id

    Raises:
        KeyNotVisible: the storage key was never disclosed to the child
    """
    trace_id, _ = open_session(world, child, storage_name)
    access = access or make_access(world, cert)
    submit_access(world, child, trace_id, access.to_wire(), seal_for_gateway(world, child, cert))
    return trace_id


def session_of(record: NodeRecord, digest: bytes) -> Optional[tuple]:
    for trace_id, session in record.proto.validations.items():
        if isinstance(session, ClientSession) and session.endpoint.node_id == digest:
            return trace_id, session
    return None


def handle_session_envelope(world: "World", child: NodeRecord, env: Envelope) -> None:
    """Envelopes from storage, addressed to one of the child's ephemeral keys."""
    found = session_of(child, env.recipient_digest)
    if found is None:
        raise NotAuthorized(f"{child.name} has no session for this envelope")
    trace_id, session = found
    payload = unseal(world.provider, session.endpoint, env)
    if payload.nonce in session.endpoint.nonce_cache:
        raise ReplayRejected("storage message replayed")
    session.endpoint.nonce_cache.add(payload.nonce)

    if payload.msg_type == MsgType.CHALLENGE_REQUEST:
        answer_challenge(world, child, session, trace_id)
    elif payload.msg_type == MsgType.ACCESS_RESULT:
        session.status = "granted" if payload.body["granted"] else "denied"
        session.reason = str(payload.body["reason"])
        child.audit(world.now, "storage_result", session.status)
        outcome = world.outcome(trace_id, "storage", child.name)
        outcome.status = session.status
        outcome.reason = session.reason
    else:
        raise NotAuthorized(f"unexpected {payload.msg_type.value} on a storage session")


def answer_challenge(world: "World", child: NodeRecord, session: ClientSession, trace_id: str) -> Optional[bytes]:
    """Decrypt P0's challenge with SK_N and return it to storage."""
    challenge = child.proto.challenges.pop(trace_id, None)
    if challenge is None:
        logging.warning(f"{child.name} holds no challenge for session {trace_id}")
        return None
    value = world.provider.decrypt(child.keys.private, challenge.sealed)
    _post_plain(world, session.endpoint, child.name, session.storage_name, session.storage_pk,
                MsgType.CHALLENGE_RESPONSE, {"value": value}, trace_id)
    return value


# Storage side

def handle_storage_envelope(world: "World", store: StorageNode, env: Envelope, source: str = "") -> None:
    """Entry point for every envelope delivered to a storage node."""
    payload = unseal(world.provider, store, env)
    if payload.nonce in store.nonce_cache:
        raise ReplayRejected(f"nonce already seen by {store.name}")
    store.nonce_cache.add(payload.nonce)
    store.observed.append(payload.to_bytes())

    if payload.msg_type == MsgType.STORAGE_REQUEST:
        _storage_on_request(world, store, payload, source)
    elif payload.msg_type == MsgType.GATEWAY_PROOF:
        _storage_on_proof(world, store, payload)
    elif payload.msg_type == MsgType.ACCESS_RESULT:
        _storage_on_denial(world, store, payload)
    elif payload.msg_type == MsgType.CHALLENGE_RESPONSE:
        session = store.sessions.get(payload.trace_id)
        if session is None:
            raise DecisionMismatch(f"{store.name} has no session {payload.trace_id}")
        if payload.sender_digest != world.provider.hash(session.reply_pk):
            raise NotAuthorized("challenge answered from another endpoint")
        storage_grant(world, store, session, bytes(payload.body["value"]))
    else:
        raise NotAuthorized(f"{store.name} does not accept {payload.msg_type.value}")


def _storage_on_request(world: "World", store: StorageNode, payload: ControlPayload, source: str) -> None:
    try:
        access = AccessCertificate.from_wire(payload.body["access"])
        sealed = bytes(payload.body["sealed"])
        reply_pk = bytes(payload.body["reply"])
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        store.audit(world.now, "storage_deny", "Malformed")
        raise NotAuthorized(f"malformed access certificate: {e}") from e
    if access.nonce in store.used_nonces:
        store.audit(world.now, "storage_deny", "Replay")
        raise ReplayRejected(f"access nonce already used at {store.name}")
    store.used_nonces.add(access.nonce)

    session = StorageSession(payload.trace_id, access, reply_pk, source)
    store.sessions[payload.trace_id] = session
    store.pending_peers.add(reply_pk)
    store.audit(world.now, "storage_forward", fingerprint(access.commitment))
    world.send(store, store.gateway_pk, MsgType.VALIDATION_REQ,
               {"access": access.to_wire(), "sealed": sealed, "storage": store.node_id}, payload.trace_id)


def _storage_on_proof(world: "World", store: StorageNode, payload: ControlPayload) -> None:
    session = store.sessions.get(payload.trace_id)
    if session is None or session.status != "forwarded":
        raise DecisionMismatch(f"{store.name} has no open session {payload.trace_id}")
    proof = GatewayProof.from_wire(payload.body["proof"])
    if not proof.verify(world.provider, store.gateway_pk):
        raise SignatureInvalid("gateway proof does not verify")
    if proof.storage_id != store.node_id or proof.cert_hash != session.access.cert_hash:
        _finish(world, store, session, False, "DecisionMismatch")
        return
    if not proof.validity.contains(world.now):
        _finish(world, store, session, False, "Expired")
        return
    session.proof = proof
    session.status = "challenged"
    _post_plain(world, store, store.name, session.reply_address, session.reply_pk,
                MsgType.CHALLENGE_REQUEST, {"storage": store.node_id}, session.trace_id)
    timeout = 4 * world.topology.max_latency()
    session.timer = world.after(timeout, lambda: _challenge_timeout(world, store, session), node=store.name)


def _storage_on_denial(world: "World", store: StorageNode, payload: ControlPayload) -> None:
    session = store.sessions.get(payload.trace_id)
    if session is None or session.status != "forwarded":
        raise DecisionMismatch(f"{store.name} has no open session {payload.trace_id}")
    fields = _denial_fields(payload.body, payload.trace_id)
    if not verify_fields(world.provider, store.gateway_pk, world.provider.hash(store.gateway_pk), fields,
                         Signature.from_wire(payload.body["signature"])):
        raise SignatureInvalid("gateway denial does not verify")
    _finish(world, store, session, False, fields["reason"])


def _challenge_timeout(world: "World", store: StorageNode, session: StorageSession) -> None:
    if session.status == "challenged":
        _finish(world, store, session, False, "LivenessFailed")


def storage_grant(world: "World", store: StorageNode, session: StorageSession, value: bytes) -> bool:
    """
    Compare N's answer with the challenge inside the gateway proof.

    Returns:
        bool: True when access was granted
    """
    if session.status != "challenged" or session.proof is None:
        raise DecisionMismatch(f"session {session.trace_id} is not awaiting a challenge answer")
    proof = session.proof
    if not proof.validity.contains(world.now):
        return _finish(world, store, session, False, "Expired")
    if not proof.p0_random or value != proof.p0_random:
        return _finish(world, store, session, False, "LivenessFailed")
    store.granted.add((session.access.commitment, proof.scope, proof.validity.not_after))
    return _finish(world, store, session, True, "")


def _finish(world: "World", store: StorageNode, session: StorageSession, granted: bool, reason: str) -> bool:
    session.status = "granted" if granted else "denied"
    if session.timer is not None:
        session.timer.cancelled = True
    detail = "grant" if granted else f"deny {reason}"
    store.audit(world.now, "storage_result", detail)
    world.trace.add(world.now, "access", store.name, "", MsgType.ACCESS_RESULT.value, session.trace_id, detail)
    logging.info(f"Storage {store.name} {detail} for session {session.trace_id}")
    _post_plain(world, store, store.name, session.reply_address, session.reply_pk, MsgType.ACCESS_RESULT,
                {"granted": granted, "reason": reason}, session.trace_id)
    store.pending_peers.discard(session.reply_pk)
    return granted


# Gateway side

def _root_for(world: "World", gw: NodeRecord, cert: ActionCertificate) -> Optional[PublicKey]:
    """The tenant root this certificate hangs from, among the roots the gateway holds."""
    signers = [e.signer_digest for e in cert.endorsements]
    top = signers[-1] if signers else cert.proposal.signer_digest
    if top == gw.node_id and gw.role == Role.ROOT:
        return gw.public
    return next((pk for pk in gw.known_keys if world.provider.hash(pk) == top), None)


def gateway_validate(world: "World", gw: NodeRecord, cert: ActionCertificate, reply_pk: PublicKey,
                     trace_id: str, storage_id: bytes = b"", commitment: Optional[bytes] = None) -> GatewaySession:
    """
    Start downward verification from the tenant root.

    A certificate that does not lead to a root the gateway serves is
    denied at once.
    """
    root_pk = _root_for(world, gw, cert)
    session = GatewaySession(trace_id, cert, reply_pk, root_pk, storage_id, commitment)
    gw.proto.validations[trace_id] = session
    gw.audit(world.now, "gateway_validate", fingerprint(cert.proposal.subject_hash))
    world.trace.add(world.now, "gateway", gw.name, "", MsgType.VALIDATION_REQ.value, trace_id,
                    "storage" if storage_id else "validator")
    if root_pk is None:
        deny(world, gw, session, "UnknownTenant", b"")
        return session
    body = {"cert": cert.to_wire(), "storage": storage_id, "commitment": commitment or b""}
    if root_pk == gw.public:
        validation_step(world, gw, cert, commitment, bool(storage_id), trace_id)
    else:
        world.send(gw, root_pk, MsgType.VALIDATION_REQ, body, trace_id)
    return session


def validation_step(world: "World", node: NodeRecord, cert: ActionCertificate, commitment: Optional[bytes],
                    storage: bool, trace_id: str) -> None:
    """One layer of the downward pass: check, then forward down or start the approval."""
    check = verify_layer(world, node, cert, commitment)
    cert_hash = cert.digest(world.provider)
    detail = "ok" if check.ok else f"deny {check.reason}"
    node.audit(world.now, "validate", detail)
    world.trace.add(world.now, "validate", node.name, "", MsgType.VALIDATION_REQ.value, trace_id, detail)
    if not check.ok:
        logging.info(f"{node.name} refused certificate {fingerprint(cert.proposal.subject_hash)}: {check.reason}")
        approve_up(world, node, trace_id, [ApprovalFlag.create(world, node, False, check.reason, cert_hash)])
        return
    if is_issuer(node, cert):
        challenge = issue_challenge(world, node, check.next_pk, trace_id) if storage else b""
        approve_up(world, node, trace_id, [ApprovalFlag.create(world, node, True, "", cert_hash)], challenge)
        return
    node.proto.validations[trace_id] = MemberValidation(cert_hash, check.next_pk)
    body = {"cert": cert.to_wire(), "storage": b"\x01" if storage else b"", "commitment": commitment or b""}
    world.send(node, check.next_pk, MsgType.VALIDATION_REQ, body, trace_id)


def issue_challenge(world: "World", p0: NodeRecord, subject_pk: PublicKey, trace_id: str) -> bytes:
    """
    P0 draws a random value, seals it to N (signing the ciphertext) and
    returns a copy sealed to the gateway.
    """
    provider = world.provider
    value = world.rng.randbytes(16)
    sealed = provider.encrypt(subject_pk, value, world.rng)
    challenge = Challenge(sealed, provider.sign(p0.keys.private, sealed), trace_id)
    world.send(p0, subject_pk, MsgType.STORAGE_CHALLENGE, challenge.to_body(), trace_id)
    gateway_pk = p0.gateway_pk if p0.gateway_pk is not None else p0.public
    p0.audit(world.now, "challenge", trace_id)
    return provider.encrypt(gateway_pk, value, world.rng)


def approve_up(world: "World", node: NodeRecord, trace_id: str, flags: list, challenge: bytes = b"") -> None:
    body = {"flags": [f.to_wire() for f in flags], "challenge": challenge}
    if node.parent is not None:
        world.send(node, node.parent, MsgType.APPROVAL, body, trace_id)
        return
    if node.is_gateway:
        session = node.proto.validations.get(trace_id)
        if isinstance(session, GatewaySession):
            conclude(world, node, session, flags, challenge)
            return
    world.send(node, node.gateway_pk, MsgType.APPROVAL, body, trace_id)


def conclude(world: "World", gw: NodeRecord, session: GatewaySession, flags: list, challenge: bytes) -> None:
    """Turn the root's approval into a signed proof, or a signed denial."""
    gw.proto.validations.pop(session.trace_id, None)
    if not flags or not flags[-1].verify(world, session.root_pk):
        deny(world, gw, session, "SignatureInvalid", b"")
        return
    failing = next((f for f in flags if not f.valid), None)
    if failing is not None:
        deny(world, gw, session, failing.reason, failing.layer_digest)
        return

    provider = world.provider
    value = provider.decrypt(gw.keys.private, challenge) if challenge else b""
    cert = session.cert
    draft = GatewayProof(
        cert_hash=cert.digest(provider),
        delegation_proof=provider.hash(encode([f.to_wire() for f in flags])),
        storage_id=session.storage_id,
        nonce=cert.proposal.nonce,
        validity=world.validity(world.settings.action_ttl),
        p0_random=value,
        scope=cert.proposal.scope,
        gateway_digest=gw.node_id,
    )
    proof = replace(draft, signature=sign_fields(provider, gw, draft.body()))
    gw.audit(world.now, "gateway_proof", session.trace_id)
    world.trace.add(world.now, "gateway", gw.name, "", MsgType.GATEWAY_PROOF.value, session.trace_id, "proof")
    world.send(gw, session.reply_pk, MsgType.GATEWAY_PROOF, {"proof": proof.to_wire()}, session.trace_id,
               signed=False)
    gw.pending_peers.discard(session.reply_pk)


def _denial_fields(body: dict, trace_id: str) -> dict:
    return {"permit": bool(body["permit"]), "reason": str(body["reason"]), "layer": bytes(body["layer"]),
            "trace": trace_id}


def deny(world: "World", gw: NodeRecord, session: GatewaySession, reason: str, layer: bytes) -> None:
    gw.proto.validations.pop(session.trace_id, None)
    if session.storage_id:
        # storage never learns which member refused
        layer = b""
    fields = {"permit": False, "reason": reason, "layer": layer, "trace": session.trace_id}
    signature = sign_fields(world.provider, gw, fields)
    gw.audit(world.now, "gateway_deny", reason)
    world.trace.add(world.now, "gateway", gw.name, "", MsgType.ACCESS_RESULT.value, session.trace_id,
                    f"deny {reason}")
    body = {"permit": False, "reason": reason, "layer": layer, "signature": signature.to_wire()}
    world.send(gw, session.reply_pk, MsgType.ACCESS_RESULT, body, session.trace_id, signed=False)
    gw.pending_peers.discard(session.reply_pk)


# Message handlers

def _on_validation_request(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    body = payload.body
    if env.kind == EnvelopeKind.PLAIN:
        if not node.is_gateway:
            raise NotAuthorized(f"{node.name} is not a gateway")
        try:
            cert = ActionCertificate.from_wire(body["cert"])
            reply_pk = bytes(body["reply"])
        except (KeyError, TypeError, ValueError) as e:
            raise NotAuthorized(f"malformed validation request: {e}") from e
        node.pending_peers.add(reply_pk)
        gateway_validate(world, node, cert, reply_pk, payload.trace_id)
        return

    sender = payload.signer_pk
    if "access" in body:
        if not node.is_gateway or world.provider.hash(sender) != bytes(body["storage"]):
            raise NotAuthorized(f"{node.name} cannot take storage requests from this sender")
        access = AccessCertificate.from_wire(body["access"])
        cert = open_sealed_cert(world, node, bytes(body["sealed"]))
        if cert.digest(world.provider) != access.cert_hash or commit(world.provider, cert.proposal) != access.commitment:
            session = GatewaySession(payload.trace_id, cert, sender, None, bytes(body["storage"]), access.commitment)
            deny(world, node, session, "DecisionMismatch", b"")
            return
        gateway_validate(world, node, cert, sender, payload.trace_id, bytes(body["storage"]), access.commitment)
        return

    from_gateway = node.role == Role.ROOT and sender == node.gateway_pk
    if sender != node.parent and not from_gateway:
        raise NotAuthorized(f"validation at {node.name} must come from its parent")
    commitment = bytes(body["commitment"]) or None
    validation_step(world, node, ActionCertificate.from_wire(body["cert"]), commitment,
                    bool(body["storage"]), payload.trace_id)


def _on_approval(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    flags = [ApprovalFlag.from_wire(f) for f in payload.body["flags"]]
    challenge = bytes(payload.body["challenge"])
    state = node.proto.validations.get(payload.trace_id)
    if isinstance(state, GatewaySession):
        if payload.signer_pk != state.root_pk:
            raise NotAuthorized("approval did not come from the tenant root")
        conclude(world, node, state, flags, challenge)
        return
    if not isinstance(state, MemberValidation):
        raise DecisionMismatch(f"{node.name} has no validation {payload.trace_id}")
    if payload.signer_pk != state.child_pk:
        raise NotAuthorized("approval did not come from the child the request went to")
    node.proto.validations.pop(payload.trace_id)

    if not flags or not flags[-1].verify(world, state.child_pk) or flags[-1].cert_hash != state.cert_hash:
        valid, reason = False, "SignatureInvalid"
    else:
        failing = next((f for f in flags if not f.valid), None)
        valid, reason = (False, failing.reason) if failing else (True, "")
    node.audit(world.now, "approval", "ok" if valid else f"deny {reason}")
    approve_up(world, node, payload.trace_id,
               flags + [ApprovalFlag.create(world, node, valid, reason, state.cert_hash)], challenge)


def _on_storage_challenge(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    if node.parent is None or payload.signer_pk != node.parent:
        raise NotAuthorized("storage challenge not sent by the direct parent")
    sealed = bytes(payload.body["sealed"])
    signature = Signature.from_wire(payload.body["signature"])
    if not world.provider.verify(node.parent, sealed, signature):
        raise SignatureInvalid("challenge signature does not verify under the parent key")
    node.proto.challenges[payload.trace_id] = Challenge(sealed, signature, payload.trace_id)
    node.audit(world.now, "challenge_received", payload.trace_id)


def install(world: "World") -> None:
    world.on(MsgType.VALIDATION_REQ, _on_validation_request, signed=False)
    world.on(MsgType.APPROVAL, _on_approval)
    world.on(MsgType.STORAGE_CHALLENGE, _on_storage_challenge)
