"""
Messaging Module for PVTN

Mechanizes the global message rule: every protocol message is encrypted to
exactly one recipient, control messages are signed before encryption, and
a node may only address keys it legitimately holds.

Wire form of an envelope:
    recipient_digest (32) | kind (1) | trace_id (8) | length (4) | ciphertext

The trace id and recipient digest travel outside the ciphertext for
routing, and are repeated inside the encrypted payload so that any change
to them in flight is detected on unseal.
"""

import logging
import random
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional

from pvtn.codec import decode, encode
from pvtn.crypto import CryptoProvider, Digest, PublicKey, Signature, fingerprint
from pvtn.errors import DecryptionFailure, KeyNotVisible, NoParent, SignatureInvalid
from pvtn.tree import NodeRecord

TRACE_ID_BYTES = 8
_LEN = struct.Struct(">I")


class MsgType(str, Enum):
    JOIN_REQ = "JoinReq"
    HASH_PROBE = "HashProbe"
    CONFLICT_RESP = "ConflictResp"
    DECISION = "Decision"
    JOIN_CERT = "JoinCert"
    JOIN_REJECT = "JoinReject"
    UPGRADE_HINT = "UpgradeHint"
    UPGRADE_REQ = "UpgradeReq"
    UPGRADE_DECISION = "UpgradeDecision"
    UPGRADE_CERT = "UpgradeCert"
    ACTION_CERT_REQ = "ActionCertReq"
    ENDORSEMENT = "Endorsement"
    ACTION_DECISION = "ActionDecision"
    ACTION_CERT = "ActionCert"
    VALIDATION_REQ = "ValidationReq"
    APPROVAL = "Approval"
    GATEWAY_PROOF = "GatewayProof"
    STORAGE_REQUEST = "StorageRequest"
    STORAGE_CHALLENGE = "StorageChallenge"
    CHALLENGE_REQUEST = "ChallengeRequest"
    CHALLENGE_RESPONSE = "ChallengeResponse"
    ACCESS_RESULT = "AccessResult"
    REVOCATION_NOTICE = "RevocationNotice"
    KEY_ROTATION = "KeyRotation"
    CHAIN_REFRESH = "ChainRefresh"


class EnvelopeKind(IntEnum):
    PLAIN = 0
    SIGNED_CONTROL = 1


@dataclass(frozen=True)
class ControlPayload:
    """
    Decrypted message content.

    signer_pk is filled in by unseal after the inner signature verified;
    it is never part of the encoded form.
    """

    msg_type: MsgType
    body: dict
    sender_digest: Digest
    nonce: bytes
    timestamp: int
    trace_id: str = ""
    signer_pk: Optional[PublicKey] = field(default=None, compare=False)

    def to_bytes(self) -> bytes:
        return encode({
            "type": self.msg_type.value,
            "body": self.body,
            "sender": self.sender_digest,
            "nonce": self.nonce,
            "t": self.timestamp,
            "trace": self.trace_id,
        })

    @classmethod
    def from_bytes(cls, data: bytes) -> "ControlPayload":
        fields = decode(data)
        if not isinstance(fields, dict) or not isinstance(fields.get("body"), dict):
            raise ValueError("payload is not a mapping")
        return cls(
            msg_type=MsgType(fields["type"]),
            body=fields["body"],
            sender_digest=bytes(fields["sender"]),
            nonce=bytes(fields["nonce"]),
            timestamp=int(fields["t"]),
            trace_id=str(fields["trace"]),
        )


@dataclass(frozen=True)
class Envelope:
    recipient_digest: Digest
    ciphertext: bytes
    kind: EnvelopeKind
    trace_id: str

    def to_wire(self) -> bytes:
        return (
            self.recipient_digest
            + bytes([int(self.kind)])
            + bytes.fromhex(self.trace_id)
            + _LEN.pack(len(self.ciphertext))
            + self.ciphertext
        )

    @classmethod
    def from_wire(cls, data: bytes) -> "Envelope":
        """
        Parse the simulated wire form.

        Raises:
            ValueError: on truncated or malformed input
        """
        head = 32 + 1 + TRACE_ID_BYTES + _LEN.size
        if len(data) < head:
            raise ValueError("envelope too short")
        (length,) = _LEN.unpack_from(data, head - _LEN.size)
        if len(data) != head + length:
            raise ValueError("envelope length mismatch")
        return cls(
            recipient_digest=bytes(data[:32]),
            kind=EnvelopeKind(data[32]),
            trace_id=bytes(data[33:33 + TRACE_ID_BYTES]).hex(),
            ciphertext=bytes(data[head:]),
        )


def addressable_keys(node: NodeRecord) -> set:
    """Keys a node may encrypt to or verify against."""
    keys = set(node.known_keys) | set(node.pending_peers)
    if node.gateway_pk is not None:
        keys.add(node.gateway_pk)
    return keys


def make_payload(provider: CryptoProvider, rng: random.Random, sender: NodeRecord,
                 msg_type: MsgType, body: dict, now: int, trace_id: str,
                 nonce: Optional[bytes] = None) -> ControlPayload:
    """Build a payload with a fresh nonce unless one is supplied."""
    return ControlPayload(
        msg_type=msg_type,
        body=body,
        sender_digest=sender.node_id,
        nonce=nonce if nonce is not None else provider.new_nonce(rng),
        timestamp=now,
        trace_id=trace_id,
    )


def seal(provider: CryptoProvider, rng: random.Random, sender: NodeRecord,
         recipient_pk: PublicKey, payload: ControlPayload, signed: bool = True) -> Envelope:
    """
    Encrypt a payload to one recipient, signing it first when signed is set.

    Args:
        provider: active crypto provider
        rng: simulation RNG used for ciphertext randomness
        sender: sending node; must hold recipient_pk
        recipient_pk: recipient public key
        payload: message content
        signed: produce a SignedControl envelope

    Returns:
        Envelope: ready for the overlay

    Raises:
        KeyNotVisible: the recipient key is not visible to the sender
    """
    if recipient_pk not in addressable_keys(sender):
        raise KeyNotVisible(f"{sender.name} does not hold key {fingerprint(provider.hash(recipient_pk))}")

    inner = payload.to_bytes()
    if signed:
        signature = provider.sign(sender.keys.private, inner)
        plaintext = encode([inner, signature.to_wire()])
        kind = EnvelopeKind.SIGNED_CONTROL
    else:
        plaintext = encode([inner])
        kind = EnvelopeKind.PLAIN

    return Envelope(
        recipient_digest=provider.hash(recipient_pk),
        ciphertext=provider.encrypt(recipient_pk, plaintext, rng),
        kind=kind,
        trace_id=payload.trace_id,
    )


def unseal(provider: CryptoProvider, recipient: NodeRecord, env: Envelope) -> ControlPayload:
    """
    Open an envelope addressed to this node.

    Returns:
        ControlPayload: with signer_pk set when the envelope was signed

    Raises:
        DecryptionFailure: not addressed here, undecryptable or malformed
        SignatureInvalid: unknown signer or bad inner signature
    """
    if env.recipient_digest != recipient.node_id:
        raise DecryptionFailure(f"envelope is not addressed to {recipient.name}")

    plaintext = provider.decrypt(recipient.keys.private, env.ciphertext)
    try:
        parts = decode(plaintext)
        if not isinstance(parts, list) or len(parts) != (2 if env.kind == EnvelopeKind.SIGNED_CONTROL else 1):
            raise ValueError("envelope kind does not match its content")
        inner = parts[0]
        payload = ControlPayload.from_bytes(inner)
        signature = Signature.from_wire(parts[1]) if len(parts) == 2 else None
    except (ValueError, KeyError, TypeError) as e:
        raise DecryptionFailure(f"malformed payload: {e}") from e

    if payload.trace_id != env.trace_id:
        raise DecryptionFailure("trace id does not match the sealed payload")
    if signature is None:
        return payload

    signer = next((pk for pk in addressable_keys(recipient)
                   if provider.hash(pk) == payload.sender_digest), None)
    if signer is None:
        raise SignatureInvalid(f"{recipient.name} does not know the signer")
    if not provider.verify(signer, inner, signature):
        logging.warning(f"Bad signature on {payload.msg_type.value} at {recipient.name}")
        raise SignatureInvalid(f"inner signature does not verify for {recipient.name}")
    return replace(payload, signer_pk=signer)


def send_up(provider: CryptoProvider, rng: random.Random, node: NodeRecord,
            payload: ControlPayload, signed: bool = True) -> Envelope:
    """Seal a payload to the node's parent. Raises NoParent at the root."""
    if node.parent is None:
        raise NoParent(f"{node.name} has no parent")
    return seal(provider, rng, node, node.parent, payload, signed)


def send_down(provider: CryptoProvider, rng: random.Random, node: NodeRecord,
              payload: ControlPayload, signed: bool = True) -> list:
    """One individually encrypted envelope per live direct child."""
    envelopes = []
    for child_pk in node.children:
        if provider.hash(child_pk) in node.revocations:
            continue
        envelopes.append(seal(provider, rng, node, child_pk, payload, signed))
    return envelopes


def sign_fields(provider: CryptoProvider, signer: NodeRecord, fields: dict) -> Signature:
    """Sign the canonical encoding of a field mapping with the signer's key."""
    return provider.sign(signer.keys.private, encode(fields))


def verify_fields(provider: CryptoProvider, pk: PublicKey, signer_digest: Digest, fields: dict,
                  signature: Optional[Signature]) -> bool:
    """True iff pk hashes to signer_digest and signs the encoding of fields."""
    if signature is None or provider.hash(pk) != signer_digest:
        return False
    return provider.verify(pk, encode(fields), signature)
