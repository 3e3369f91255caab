import pytest

from pvtn.action_protocol import (
    ActionCertificate,
    commit,
    parent_propose,
    request_action_cert,
    validate_action,
    verify_layer,
)
from pvtn.errors import KeyNotVisible, NoParent, NotAManager, NotAuthorized, ScopeExceeded
from pvtn.messaging import MsgType
from pvtn.tenancy import Policy
from tests.conftest import certify


def validate(world, validator, cert, permission):
    scope = world.tenant("acme").scope(permission)
    trace_id = validate_action(world, world.node(validator), scope, cert, world.node("gw").public)
    world.run()
    return world.outcomes[trace_id]


class TestIssuance:
    def test_leaf_gets_certificate_from_parent(self, gated_world):
        cert = certify(gated_world, "l1")
        m1, l1 = gated_world.node("m1"), gated_world.node("l1")
        assert cert.proposal.subject_hash == l1.node_id
        assert cert.proposal.signer_digest == m1.node_id
        assert cert.verify(gated_world.provider, m1.public)
        assert [e.signer_digest for e in cert.endorsements] == [gated_world.node("acme-root").node_id]
        assert gated_world.issued[-1].kind == "action" and gated_world.issued[-1].issuer == "m1"

    def test_certificate_survives_wire_form(self, gated_world):
        cert = certify(gated_world, "l1")
        assert ActionCertificate.from_wire(cert.to_wire()) == cert

    def test_manager_under_root_needs_no_endorsement(self, gated_world):
        cert = certify(gated_world, "m1")
        assert cert.endorsements == ()
        assert cert.proposal.signer_digest == gated_world.node("acme-root").node_id

    def test_root_has_no_parent(self, gated_world):
        with pytest.raises(NoParent):
            request_action_cert(gated_world, gated_world.node("acme-root"), "tenant:00")

    def test_denied_scope_never_certified(self, gated_world):
        tenant = gated_world.tenant("acme")
        tenant.policy = Policy(deny_scopes=(tenant.scope("admin"),))
        trace_id = request_action_cert(gated_world, gated_world.node("l2"), tenant.scope("admin"))
        gated_world.run()
        outcome = gated_world.outcomes[trace_id]
        assert outcome.status == "denied" and outcome.reason == "Policy"
        assert gated_world.node("l2").proto.action_certs == []
        assert gated_world.trace.count(msg_type=MsgType.ACTION_CERT.value) == 0

    def test_scope_outside_parent_is_refused_at_parent(self, gated_world):
        trace_id = request_action_cert(gated_world, gated_world.node("l1"), "tenant:ffff")
        gated_world.run()
        assert gated_world.outcomes[trace_id].status == "pending"
        assert gated_world.trace.count(kind="reject", detail="ScopeExceeded") == 1
        assert gated_world.trace.count(msg_type=MsgType.ENDORSEMENT.value) == 0


class TestParentPropose:
    def test_leaf_cannot_propose(self, world):
        with pytest.raises(NotAManager):
            parent_propose(world, world.node("l1"), world.node("l2").public, "tenant:00", "00" * 8)

    def test_requester_must_be_a_child(self, world):
        with pytest.raises(NotAuthorized):
            parent_propose(world, world.node("m1"), world.node("l3").public,
                           world.node("m1").scope(), "00" * 8)

    def test_scope_checked_against_own_delegation(self, world):
        with pytest.raises(ScopeExceeded):
            parent_propose(world, world.node("m1"), world.node("l1").public, "tenant:ffff", "00" * 8)


class TestValidation:
    def test_granted_action_is_permitted(self, gated_world):
        cert = certify(gated_world, "l1")
        outcome = validate(gated_world, "val", cert, "read")
        assert outcome.status == "permit"
        assert gated_world.node("val").verifications == 1

    def test_validator_only_holds_gateway_key(self, gated_world):
        cert = certify(gated_world, "l1")
        validate(gated_world, "val", cert, "read")
        val = gated_world.node("val")
        assert val.known_keys == {gated_world.node("gw").public}

    def test_action_outside_scope_is_denied(self, gated_world):
        cert = certify(gated_world, "l1")
        outcome = validate(gated_world, "val", cert, "write")
        assert outcome.status == "deny" and outcome.reason == "ScopeExceeded"

    def test_validator_without_gateway_key(self, gated_world):
        cert = certify(gated_world, "l1")
        gated_world.add_external("stranger")
        with pytest.raises(KeyNotVisible):
            validate_action(gated_world, gated_world.node("stranger"), gated_world.tenant("acme").scope("read"),
                            cert, gated_world.node("gw").public)

    def test_stale_certificate_is_refused_by_issuer(self, gated_world):
        cert = certify(gated_world, "l1")
        scope = gated_world.tenant("acme").scope("read")
        started = []
        gated_world.after(gated_world.settings.action_ttl + 1, lambda: started.append(
            validate_action(gated_world, gated_world.node("val"), scope, cert, gated_world.node("gw").public)))
        gated_world.run()
        outcome = gated_world.outcomes[started[0]]
        assert outcome.status == "deny" and outcome.reason == "Expired"

    def test_each_layer_walks_down(self, gated_world):
        cert = certify(gated_world, "l1")
        validate(gated_world, "val", cert, "read")
        checked = [line.src for line in gated_world.trace.select(kind="validate")]
        assert checked == ["acme-root", "m1"]

    def test_layers_off_the_path(self, gated_world):
        cert = certify(gated_world, "l1")
        assert verify_layer(gated_world, gated_world.node("m2"), cert).reason == "NotOnPath"
        assert verify_layer(gated_world, gated_world.node("acme-root"), cert).ok
        assert verify_layer(gated_world, gated_world.node("m1"), cert).ok

    def test_issuer_checks_commitment(self, gated_world):
        cert = certify(gated_world, "l1")
        m1 = gated_world.node("m1")
        assert verify_layer(gated_world, m1, cert, commit(gated_world.provider, cert.proposal)).ok
        assert verify_layer(gated_world, m1, cert, b"\x00" * 32).reason == "CommitmentMismatch"
