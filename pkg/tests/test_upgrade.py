import pytest

from pvtn.errors import NotAManager, NotAuthorized
from pvtn.messaging import MsgType
from pvtn.tenancy import Policy
from pvtn.tree import Role, tree_problems
from pvtn.upgrade_protocol import leaf_request_upgrade, parent_sign_upgrade
from tests.conftest import make_world


def upgrade(world, leaf_name):
    trace_id = leaf_request_upgrade(world, world.node(leaf_name))
    world.run()
    return world.outcomes[trace_id]


@pytest.fixture
def deep_world():
    """acme-root -> m1 -> m2 -> l3, all managers except l3."""
    w = make_world(seed=23)
    w.create_tenant("acme")
    w.add_member("acme", "m1", "acme-root", Role.MANAGER)
    w.add_member("acme", "m2", "m1", Role.MANAGER)
    w.add_member("acme", "l3", "m2")
    return w


class TestUpgrade:
    def test_leaf_is_promoted(self, world):
        outcome = upgrade(world, "l1")
        l1, m1 = world.node("l1"), world.node("m1")
        assert outcome.status == "approved"
        assert l1.role == Role.MANAGER
        assert m1.children[l1.public] == Role.MANAGER
        assert l1.cert.role == Role.MANAGER and l1.cert.verify(world.provider, m1.public)
        assert world.issued[-1].kind == "upgrade" and world.issued[-1].issuer == "m1"
        assert tree_problems(world.view(world.tenant("acme").tenant_id)) == []

    def test_only_the_direct_parent_issues(self, world):
        before = {r.issuer for r in world.issued}
        upgrade(world, "l1")
        assert [r.issuer for r in world.issued if r.kind == "upgrade"] == ["m1"]
        assert {r.issuer for r in world.issued} == before

    def test_promoted_member_can_admit(self, world):
        upgrade(world, "l1")
        assert world.node("l1").can_issue()

    def test_depth_limit_denies(self, world):
        world.tenant("acme").policy = Policy(max_depth=2)
        outcome = upgrade(world, "l1")
        assert outcome.status == "denied"
        assert outcome.reason == "DepthLimit"
        assert world.node("l1").role == Role.LEAF
        assert world.trace.count(msg_type=MsgType.UPGRADE_CERT.value) == 0

    def test_leaf_under_root_is_decided_at_root(self, world):
        world.add_member("acme", "l0", "acme-root")
        outcome = upgrade(world, "l0")
        assert outcome.status == "approved"
        assert world.node("l0").role == Role.MANAGER
        assert world.trace.count(msg_type=MsgType.UPGRADE_REQ.value) == 0

    def test_non_leaf_cannot_ask(self, world):
        assert leaf_request_upgrade(world, world.node("m1")) is None

    def test_quota_override_at_upper_layer(self, deep_world):
        tenant = deep_world.tenant("acme")
        tenant.overrides["m1"] = tenant.policy.merged({"quota": 1})
        outcome = upgrade(deep_world, "l3")
        assert outcome.status == "denied"
        assert outcome.reason == "Custom"
        assert deep_world.trace.count(kind="decision", src="m1") == 1
        assert deep_world.trace.count(kind="send", src="m1", msg_type=MsgType.UPGRADE_REQ.value) == 0

    def test_deny_travels_down_only(self, deep_world):
        deep_world.tenant("acme").policy = Policy(max_depth=3)
        outcome = upgrade(deep_world, "l3")
        assert outcome.reason == "DepthLimit"
        assert deep_world.trace.count(kind="deliver", dst="acme-root", msg_type=MsgType.UPGRADE_REQ.value) == 0

    def test_three_layer_approval(self, deep_world):
        assert upgrade(deep_world, "l3").status == "approved"
        assert deep_world.trace.count(kind="policy", detail="Approve") == 2


class TestParentSign:
    def test_leaf_cannot_sign(self, world):
        with pytest.raises(NotAManager):
            parent_sign_upgrade(world, world.node("l1"), world.node("l2").public)

    def test_only_own_leaf_children(self, world):
        with pytest.raises(NotAuthorized):
            parent_sign_upgrade(world, world.node("m1"), world.node("l3").public)

    def test_root_role_refused(self, world):
        with pytest.raises(NotAuthorized):
            parent_sign_upgrade(world, world.node("m1"), world.node("l1").public, Role.ROOT)

    def test_request_and_attestation_are_signed(self, world):
        m1 = world.node("m1")
        request, attestation = parent_sign_upgrade(world, m1, world.node("l1").public)
        assert request.verify(world.provider, m1.public)
        assert attestation.verify(world.provider, m1.public)
        assert not request.verify(world.provider, world.node("m2").public)
        assert attestation.leaf_hash == request.leaf_hash
        world.run()
        assert world.node("l1").role == Role.MANAGER
