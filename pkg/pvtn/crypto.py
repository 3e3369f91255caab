"""
Crypto Provider Module for PVTN

This module supplies the cryptographic primitives every protocol relies on:
- signatures (Sign_SK / Verify_PK)
- public-key encryption of arbitrary-length payloads (Enc_PK)
- a collision-resistant hash H(.)
- nonce generation from the caller's seeded RNG

Two providers implement the same contract. RealProvider uses Ed25519 and a
hybrid X25519 + HKDF + AES-GCM construction from the `cryptography` package.
MockProvider uses keyed hash transformations and is fully deterministic
under a seed, which keeps golden traces stable. Providers hold no mutable
state and can be shared across threads.
"""

import hashlib
import hmac
import os
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from pvtn.errors import DecryptionFailure, ProviderError

PublicKey = bytes
PrivateKey = bytes
Digest = bytes
Ciphertext = bytes

SEED_BYTES = 32
NONCE_BYTES = 16
DIGEST_BYTES = 32


@dataclass(frozen=True)
class KeyPair:
    """A node's key pair. The private half never leaves the owning record."""

    public: PublicKey
    private: PrivateKey = field(repr=False)


@dataclass(frozen=True)
class Signature:
    """Signature bytes plus the digest of the signer's public key."""

    signer_hint: Digest
    value: bytes

    def to_wire(self) -> dict:
        return {"signer_hint": self.signer_hint, "value": self.value}

    @classmethod
    def from_wire(cls, data: dict) -> "Signature":
        return cls(signer_hint=bytes(data["signer_hint"]), value=bytes(data["value"]))


def fingerprint(data: bytes) -> str:
    """Short hex prefix of a digest or key, safe to log."""
    return data[:4].hex()


class CryptoProvider(ABC):
    """
    Contract shared by all providers.

    Hashing and nonce generation are identical for every provider; key
    generation, signing and encryption are provider specific.
    """

    name = "abstract"

    def hash(self, data: bytes) -> Digest:
        return hashlib.sha256(data).digest()

    def new_nonce(self, rng: random.Random) -> bytes:
        return rng.randbytes(NONCE_BYTES)

    def sign(self, sk: PrivateKey, msg: bytes) -> Signature:
        """
        Sign a message.

        Args:
            sk: private key of the signer
            msg: canonical message bytes

        Returns:
            Signature: the signature, hinted with the signer's key digest

        Raises:
            ProviderError: if sk is malformed for this provider
        """
        value = self._sign_raw(sk, msg)
        return Signature(signer_hint=self.hash(self.public_of(sk)), value=value)

    def verify(self, pk: PublicKey, msg: bytes, sig: Signature) -> bool:
        """True iff sig was produced over msg by the private key matching pk."""
        try:
            if sig.signer_hint != self.hash(pk):
                return False
            return self._verify_raw(pk, msg, sig.value)
        except (ValueError, TypeError, AttributeError):
            return False

    @abstractmethod
    def generate_keypair(self, rng: random.Random) -> KeyPair:
        """Draw a fresh key pair from the caller's RNG."""

    @abstractmethod
    def public_of(self, sk: PrivateKey) -> PublicKey:
        """Derive the public key for a private key."""

    @abstractmethod
    def encrypt(self, pk: PublicKey, plaintext: bytes, rng: Optional[random.Random] = None) -> Ciphertext:
        """Encrypt so that only the holder of the matching private key can decrypt."""

    @abstractmethod
    def decrypt(self, sk: PrivateKey, ct: Ciphertext) -> bytes:
        """Decrypt or raise DecryptionFailure."""

    @abstractmethod
    def _sign_raw(self, sk: PrivateKey, msg: bytes) -> bytes:
        ...

    @abstractmethod
    def _verify_raw(self, pk: PublicKey, msg: bytes, value: bytes) -> bool:
        ...


def _random_bytes(rng: Optional[random.Random], size: int) -> bytes:
    return rng.randbytes(size) if rng is not None else os.urandom(size)


class RealProvider(CryptoProvider):
    """
    Standard primitives: Ed25519 signatures and hybrid X25519/AES-GCM encryption.

    A private key is a 32-byte seed. The Ed25519 key is built from the seed
    directly and the X25519 key from a hash of it, so one seed serves both
    purposes. The public key is the two raw public keys concatenated.
    """

    name = "real"
    PUBLIC_BYTES = 64

    def _ed25519(self, sk: PrivateKey) -> Ed25519PrivateKey:
        if len(sk) != SEED_BYTES:
            raise ProviderError(f"private key must be {SEED_BYTES} bytes, got {len(sk)}")
        try:
            return Ed25519PrivateKey.from_private_bytes(sk)
        except ValueError as e:
            raise ProviderError(str(e)) from e

    def _x25519(self, sk: PrivateKey) -> X25519PrivateKey:
        if len(sk) != SEED_BYTES:
            raise ProviderError(f"private key must be {SEED_BYTES} bytes, got {len(sk)}")
        return X25519PrivateKey.from_private_bytes(hashlib.sha256(b"pvtn-x25519" + sk).digest())

    @staticmethod
    def _raw(public_key) -> bytes:
        return public_key.public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )

    def public_of(self, sk: PrivateKey) -> PublicKey:
        return self._raw(self._ed25519(sk).public_key()) + self._raw(self._x25519(sk).public_key())

    def generate_keypair(self, rng: random.Random) -> KeyPair:
        sk = rng.randbytes(SEED_BYTES)
        return KeyPair(public=self.public_of(sk), private=sk)

    def _sign_raw(self, sk: PrivateKey, msg: bytes) -> bytes:
        return self._ed25519(sk).sign(msg)

    def _verify_raw(self, pk: PublicKey, msg: bytes, value: bytes) -> bool:
        if len(pk) != self.PUBLIC_BYTES:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(pk[:32]).verify(value, msg)
            return True
        except InvalidSignature:
            return False

    def _wrap_key(self, shared: bytes, ephemeral: bytes, recipient: PublicKey) -> bytes:
        return HKDF(
            algorithm=hashes.SHA256(),
            length=32,
            salt=None,
            info=b"pvtn-hybrid" + ephemeral + recipient,
        ).derive(shared)

    def encrypt(self, pk: PublicKey, plaintext: bytes, rng: Optional[random.Random] = None) -> Ciphertext:
        if len(pk) != self.PUBLIC_BYTES:
            raise ProviderError(f"public key must be {self.PUBLIC_BYTES} bytes, got {len(pk)}")
        ephemeral = X25519PrivateKey.from_private_bytes(_random_bytes(rng, 32))
        ephemeral_pub = self._raw(ephemeral.public_key())
        try:
            shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(pk[32:]))
        except ValueError as e:
            raise ProviderError(str(e)) from e
        key = self._wrap_key(shared, ephemeral_pub, pk)
        iv = _random_bytes(rng, 12)
        return ephemeral_pub + iv + AESGCM(key).encrypt(iv, plaintext, ephemeral_pub)

    def decrypt(self, sk: PrivateKey, ct: Ciphertext) -> bytes:
        if len(ct) < 32 + 12 + 16:
            raise DecryptionFailure("ciphertext too short")
        ephemeral_pub, iv, body = ct[:32], ct[32:44], ct[44:]
        try:
            shared = self._x25519(sk).exchange(X25519PublicKey.from_public_bytes(ephemeral_pub))
            key = self._wrap_key(shared, ephemeral_pub, self.public_of(sk))
            return AESGCM(key).decrypt(iv, body, ephemeral_pub)
        except (InvalidTag, ValueError, ProviderError) as e:
            raise DecryptionFailure("cannot open ciphertext with this key") from e


class MockProvider(CryptoProvider):
    """
    Deterministic stand-in for ideal primitives.

    The provider holds a secret mask derived from its seed. A public key is a
    one-way hash of the private key under that mask, so it reveals nothing
    about the private key. Signatures and the SHAKE-256 keystream (with its
    HMAC tag) are keyed by a per-key secret that the provider derives from
    the public key and the mask. Code outside the provider can only reach
    that secret through a private key it actually holds.
    """

    name = "mock"
    TAG_BYTES = 32

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._mask = hashlib.sha256(b"pvtn-mock-mask" + seed.to_bytes(8, "big", signed=True)).digest()

    def public_of(self, sk: PrivateKey) -> PublicKey:
        if len(sk) != SEED_BYTES:
            raise ProviderError(f"private key must be {SEED_BYTES} bytes, got {len(sk)}")
        return hashlib.sha256(b"pub" + self._mask + sk).digest()

    def _key_secret(self, pk: PublicKey, purpose: bytes) -> bytes:
        return hmac.new(self._mask, purpose + pk, hashlib.sha256).digest()

    def generate_keypair(self, rng: random.Random) -> KeyPair:
        sk = rng.randbytes(SEED_BYTES)
        return KeyPair(public=self.public_of(sk), private=sk)

    def _sign_raw(self, sk: PrivateKey, msg: bytes) -> bytes:
        return hmac.new(self._key_secret(self.public_of(sk), b"sig"), msg, hashlib.sha256).digest()

    def _verify_raw(self, pk: PublicKey, msg: bytes, value: bytes) -> bool:
        if len(pk) != SEED_BYTES:
            return False
        expected = hmac.new(self._key_secret(pk, b"sig"), msg, hashlib.sha256).digest()
        return hmac.compare_digest(expected, value)

    def encrypt(self, pk: PublicKey, plaintext: bytes, rng: Optional[random.Random] = None) -> Ciphertext:
        if len(pk) != SEED_BYTES:
            raise ProviderError(f"public key must be {SEED_BYTES} bytes, got {len(pk)}")
        key = self._key_secret(pk, b"enc")
        iv = _random_bytes(rng, NONCE_BYTES)
        stream = hashlib.shake_256(key + iv).digest(len(plaintext)) if plaintext else b""
        body = bytes(a ^ b for a, b in zip(plaintext, stream))
        tag = hmac.new(key, iv + body, hashlib.sha256).digest()
        return iv + body + tag

    def decrypt(self, sk: PrivateKey, ct: Ciphertext) -> bytes:
        if len(sk) != SEED_BYTES or len(ct) < NONCE_BYTES + self.TAG_BYTES:
            raise DecryptionFailure("malformed key or ciphertext")
        key = self._key_secret(self.public_of(sk), b"enc")
        iv, body, tag = ct[:NONCE_BYTES], ct[NONCE_BYTES:-self.TAG_BYTES], ct[-self.TAG_BYTES:]
        if not hmac.compare_digest(hmac.new(key, iv + body, hashlib.sha256).digest(), tag):
            raise DecryptionFailure("integrity tag mismatch")
        stream = hashlib.shake_256(key + iv).digest(len(body)) if body else b""
        return bytes(a ^ b for a, b in zip(body, stream))


def make_provider(name: str, seed: int = 0) -> CryptoProvider:
    """
    Build a provider by name.

    Args:
        name: "real" or "mock"
        seed: mask seed for the mock provider (ignored by the real one)

    Raises:
        ProviderError: for an unknown provider name
    """
    if name == "real":
        return RealProvider()
    if name == "mock":
        return MockProvider(seed)
    raise ProviderError(f"unknown provider '{name}'")
