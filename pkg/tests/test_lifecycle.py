import pytest

from pvtn.adversary import revocation_locality, rotation_locality
from pvtn.errors import NoParent, NotAManager, NotAuthorized
from pvtn.lifecycle import leave, revoke_member, rotate_member_keys
from pvtn.messaging import MsgType
from pvtn.tree import RevocationReason, Role, verify_chain


class TestRevocation:
    def test_termination_stays_local(self, world):
        revoke_member(world, world.node("acme-root"), world.node("m1"))
        world.run()
        assert all(world.node(n).revoked for n in ("m1", "l1", "l2"))
        assert world.node("m1").node_id not in world.node("l3").revocations
        assert world.trace.count(msg_type=MsgType.REVOCATION_NOTICE.value, kind="send") == 0

    def test_compromise_reaches_every_member(self, world):
        l1 = world.node("l1")
        revoke_member(world, world.node("m1"), l1, RevocationReason.COMPROMISE)
        world.run()
        for name in ("acme-root", "m2", "l3", "l2"):
            assert l1.node_id in world.node(name).revocations, name

    def test_revoked_chain_no_longer_verifies(self, world):
        view = world.view(world.tenant("acme").tenant_id)
        chain = view.chain_of(world.node("l2"))
        revoke_member(world, world.node("acme-root"), world.node("m1"))
        view = world.view(world.tenant("acme").tenant_id)
        assert not verify_chain(world.provider, chain, view.root.public, world.now, view.revoked_digests())

    def test_outsider_cannot_revoke(self, world):
        with pytest.raises(NotAuthorized):
            revoke_member(world, world.node("m2"), world.node("l1"))

    def test_leave(self, world):
        notice = leave(world, world.node("l3"))
        assert notice.reason == RevocationReason.VOLUNTARY_LEAVE
        assert world.node("l3").revoked
        assert world.node("l3").node_id in world.node("m2").revocations

    def test_root_cannot_leave(self, world):
        with pytest.raises(NoParent):
            leave(world, world.node("acme-root"))

    def test_revocation_locality(self, world):
        report = revocation_locality(world, "m1", "l1")
        assert report.ok
        assert set(report.changed) <= {"m1", "l1", "l2"}


class TestRotation:
    def test_children_learn_the_new_key(self, world):
        m1 = world.node("m1")
        old = m1.public
        reissued = rotate_member_keys(world, m1)
        world.run()
        assert len(reissued) == 2
        assert m1.public != old
        for name in ("l1", "l2"):
            child = world.node(name)
            assert child.parent == m1.public
            assert child.audit_log[-1].event == "parent_rotated"
        assert world.trace.count(msg_type=MsgType.KEY_ROTATION.value, kind="deliver") == 2

    def test_chains_verify_after_rotation(self, world):
        rotate_member_keys(world, world.node("m1"))
        world.run()
        view = world.view(world.tenant("acme").tenant_id)
        chain = view.chain_of(world.node("l1"))
        assert verify_chain(world.provider, chain, view.root.public, world.now,
                            view.revoked_digests(), view.retired())

    def test_root_rotation_updates_gateway(self, world):
        world.add_external("gw")
        world.set_gateway("acme", "gw")
        root = world.node("acme-root")
        rotate_member_keys(world, root)
        world.run()
        assert root.public in world.node("gw").known_keys
        assert world.tenant("acme").tenant_id == world.view(world.tenant("acme").tenant_id).root.tenant

    def test_rotation_locality(self, world):
        report = rotation_locality(world, "m1")
        assert report.ok
        assert "m2" not in report.changed and "l3" not in report.changed

    def test_leaf_has_nothing_to_rotate(self, world):
        assert world.node("l1").role == Role.LEAF
        with pytest.raises(NotAManager):
            rotate_member_keys(world, world.node("l1"))
