import pytest

from pvtn.errors import DecryptionFailure, KeyNotVisible, NoParent, SignatureInvalid
from pvtn.messaging import (
    ControlPayload,
    Envelope,
    EnvelopeKind,
    MsgType,
    make_payload,
    seal,
    send_down,
    send_up,
    sign_fields,
    unseal,
    verify_fields,
)
from pvtn.tree import new_node

TRACE = "0011223344556677"


@pytest.fixture
def pair(provider, rng):
    """alice and bob, each holding the other's key."""
    alice = new_node(provider, rng, "alice")
    bob = new_node(provider, rng, "bob")
    alice.known_keys.add(bob.public)
    bob.known_keys.add(alice.public)
    return alice, bob


def payload_from(provider, rng, sender, body=None):
    return make_payload(provider, rng, sender, MsgType.JOIN_REQ, body or {"x": 1}, 5, TRACE)


class TestSealUnseal:
    def test_signed_envelope_opens_for_recipient(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        assert env.kind == EnvelopeKind.SIGNED_CONTROL
        assert env.recipient_digest == bob.node_id
        opened = unseal(provider, bob, env)
        assert opened.body == {"x": 1}
        assert opened.signer_pk == alice.public
        assert opened.timestamp == 5

    def test_plain_envelope_has_no_signer(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice), signed=False)
        assert env.kind == EnvelopeKind.PLAIN
        assert unseal(provider, bob, env).signer_pk is None

    def test_sender_needs_recipient_key(self, provider, rng, pair):
        alice, _ = pair
        stranger = new_node(provider, rng, "stranger")
        with pytest.raises(KeyNotVisible):
            seal(provider, rng, alice, stranger.public, payload_from(provider, rng, alice))

    def test_other_node_cannot_open(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        with pytest.raises(DecryptionFailure):
            unseal(provider, alice, env)

    def test_unknown_signer_rejected(self, provider, rng, pair):
        alice, bob = pair
        bob.known_keys.discard(alice.public)
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        with pytest.raises(SignatureInvalid):
            unseal(provider, bob, env)

    def test_changed_trace_id_detected(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        moved = Envelope(env.recipient_digest, env.ciphertext, env.kind, "ffffffffffffffff")
        with pytest.raises(DecryptionFailure):
            unseal(provider, bob, moved)

    def test_kind_flip_detected(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        flipped = Envelope(env.recipient_digest, env.ciphertext, EnvelopeKind.PLAIN, env.trace_id)
        with pytest.raises(DecryptionFailure):
            unseal(provider, bob, flipped)


class TestWireForm:
    def test_wire_form_parses_back(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        assert Envelope.from_wire(env.to_wire()) == env

    def test_truncated_wire_form(self, provider, rng, pair):
        alice, bob = pair
        env = seal(provider, rng, alice, bob.public, payload_from(provider, rng, alice))
        with pytest.raises(ValueError):
            Envelope.from_wire(env.to_wire()[:-1])

    def test_payload_bytes(self, provider, rng, pair):
        alice, _ = pair
        payload = payload_from(provider, rng, alice)
        assert ControlPayload.from_bytes(payload.to_bytes()) == payload


class TestTreeSends:
    def test_send_up_needs_parent(self, provider, rng, pair):
        alice, _ = pair
        with pytest.raises(NoParent):
            send_up(provider, rng, alice, payload_from(provider, rng, alice))

    def test_send_up_goes_to_parent(self, provider, rng, pair):
        alice, bob = pair
        alice.parent = bob.public
        env = send_up(provider, rng, alice, payload_from(provider, rng, alice))
        assert env.recipient_digest == bob.node_id

    def test_send_down_skips_revoked_children(self, provider, rng):
        parent = new_node(provider, rng, "p")
        kids = [new_node(provider, rng, f"c{i}") for i in range(3)]
        for kid in kids:
            parent.children[kid.public] = "leaf"
            parent.known_keys.add(kid.public)
        parent.revocations.add(kids[1].node_id)
        envelopes = send_down(provider, rng, parent, payload_from(provider, rng, parent))
        assert [e.recipient_digest for e in envelopes] == [kids[0].node_id, kids[2].node_id]


def test_field_signatures(provider, rng, pair):
    alice, bob = pair
    fields = {"h": b"\x01", "t": 3}
    sig = sign_fields(provider, alice, fields)
    assert verify_fields(provider, alice.public, alice.node_id, fields, sig)
    assert not verify_fields(provider, alice.public, bob.node_id, fields, sig)
    assert not verify_fields(provider, alice.public, alice.node_id, {"h": b"\x02", "t": 3}, sig)
    assert not verify_fields(provider, alice.public, alice.node_id, fields, None)
