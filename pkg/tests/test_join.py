import pytest

from pvtn.errors import KeyNotVisible
from pvtn.join_protocol import Answer, DecisionRecord, Verdict, combine, conflict_check_local, initiate_join
from pvtn.messaging import MsgType
from pvtn.overlay import RouteMode
from pvtn.tree import Role, tree_problems, verify_chain
from tests.conftest import make_world


def join(world, candidate, manager, mode=RouteMode.DIRECT_IP):
    world.invite(manager, candidate)
    trace_id = initiate_join(world, world.node(candidate), world.node(manager).public, mode)
    world.run()
    return world.outcomes[trace_id]


class TestJoin:
    def test_invited_candidate_is_admitted(self, world):
        world.add_external("carol")
        outcome = join(world, "carol", "m1")
        carol = world.node("carol")
        m1 = world.node("m1")
        assert outcome.status == "approved"
        assert carol.parent == m1.public
        assert carol.role == Role.LEAF
        assert carol.tenant == world.tenant("acme").tenant_id
        assert m1.children[carol.public] == Role.LEAF
        assert world.issued[-1].issuer == "m1" and world.issued[-1].kind == "delegation"

    def test_admitted_chain_verifies(self, world):
        world.add_external("carol")
        join(world, "carol", "m1")
        view = world.view(world.tenant("acme").tenant_id)
        assert tree_problems(view) == []
        assert verify_chain(world.provider, view.chain_of(world.node("carol")), view.root.public, world.now)

    def test_root_can_admit_directly(self, world):
        world.add_external("dana")
        assert join(world, "dana", "acme-root").status == "approved"
        assert world.node("dana").parent == world.node("acme-root").public

    @pytest.mark.parametrize("mode", list(RouteMode))
    def test_every_route_mode_reaches_the_manager(self, world, mode):
        world.add_external("gw")
        world.set_gateway("acme", "gw")
        world.add_external("erin")
        assert join(world, "erin", "m2", mode).status == "approved"

    def test_key_already_in_tenant_is_rejected(self, world):
        world.add_external("bob", keys=world.node("l1").keys)
        outcome = join(world, "bob", "m2")
        assert outcome.status == "rejected"
        assert outcome.reason == "Conflict"
        assert world.node("bob").tenant is None
        assert world.trace.count(msg_type=MsgType.JOIN_REJECT.value, kind="deliver") == 1

    def test_uninvited_candidate_is_refused_locally(self, world):
        world.add_external("mallory")
        world.disclose("mallory", "m1")
        trace_id = initiate_join(world, world.node("mallory"), world.node("m1").public)
        world.run()
        assert world.outcomes[trace_id].status == "pending"
        assert world.trace.count(kind="reject", detail="NotAuthorized") == 1
        assert world.trace.count(msg_type=MsgType.HASH_PROBE.value) == 0

    def test_leaf_cannot_admit(self, world):
        world.add_external("carol")
        world.invite("l1", "carol")
        initiate_join(world, world.node("carol"), world.node("l1").public)
        world.run()
        assert world.trace.count(kind="reject", detail="NotAManager") == 1
        assert world.node("carol").tenant is None

    def test_candidate_needs_disclosed_manager_key(self, world):
        world.add_external("carol")
        with pytest.raises(KeyNotVisible):
            initiate_join(world, world.node("carol"), world.node("m1").public)

    def test_decision_reaches_every_member_once(self, world):
        world.add_external("carol")
        join(world, "carol", "m1")
        for name in ("acme-root", "m1", "m2", "l1", "l2", "l3"):
            assert len(world.node(name).proto.decisions) == 1, name


class TestDeepTree:
    @pytest.fixture
    def chain_world(self):
        """acme-root -> m0 -> m1 -> ... -> m9, all managers."""
        w = make_world()
        w.create_tenant("acme")
        parent = "acme-root"
        for i in range(10):
            w.add_member("acme", f"m{i}", parent, Role.MANAGER)
            parent = f"m{i}"
        return w

    def test_join_at_depth_ten(self, chain_world):
        chain_world.add_external("carol")
        outcome = join(chain_world, "carol", "m9")
        assert outcome.status == "approved", outcome.reason
        assert chain_world.node("carol").parent == chain_world.node("m9").public
        assert chain_world.trace.count(kind="reject", detail="StaleDecision") == 0

    def test_every_hop_restamps_the_decision(self, chain_world):
        chain_world.add_external("carol")
        join(chain_world, "carol", "m9")
        stamps = [next(iter(chain_world.node(f"m{i}").proto.decisions.values())).t for i in range(10)]
        assert stamps == sorted(stamps)
        assert stamps[-1] > stamps[0]


class TestConflictCheck:
    def test_local_check_sees_live_children_only(self, world):
        m1 = world.node("m1")
        l1 = world.node("l1")
        assert conflict_check_local(world.provider, m1, l1.node_id) == Answer.YES
        m1.revocations.add(l1.node_id)
        assert conflict_check_local(world.provider, m1, l1.node_id) == Answer.NO

    def test_root_answers_for_its_own_key(self, world):
        root = world.node("acme-root")
        assert conflict_check_local(world.provider, root, root.node_id) == Answer.YES

    @pytest.mark.parametrize("own,responses,expected", [
        (Answer.NO, [], Answer.NO),
        (Answer.NO, [Answer.NO, Answer.NO], Answer.NO),
        (Answer.NO, [Answer.NO, Answer.YES], Answer.YES),
        (Answer.YES, [], Answer.YES),
    ])
    def test_answers_are_ored(self, own, responses, expected):
        assert combine(own, responses) == expected


def test_decision_record_signature(world):
    root = world.node("acme-root")
    record = DecisionRecord.create(world.provider, root, b"h" * 32, Verdict.APPROVE, 4, "")
    assert record.verify(world.provider, root.public)
    assert not record.verify(world.provider, world.node("m1").public)
    assert DecisionRecord.from_wire(record.to_wire()) == record
