import random
from collections import Counter

import pytest

from pvtn.adversary import compromise_containment_check, ensure_adversary, revocation_locality
from pvtn.join_protocol import Verdict, initiate_join
from pvtn.lifecycle import revoke_member
from pvtn.messaging import MsgType
from pvtn.tree import Role
from pvtn.upgrade_protocol import DenyReason, FlagVerdict, UpgradeDecision
from tests.conftest import make_world

MAX_DEPTH = 4


def random_tree(seed: int, size: int = 0):
    """A one-tenant world of random shape; returns (world, rng)."""
    rng = random.Random(seed)
    world = make_world(seed=seed)
    world.create_tenant("acme")
    issuers = {"acme-root": 0}
    for i in range(size or rng.randint(3, 14)):
        parent = rng.choice(sorted(issuers))
        depth = issuers[parent] + 1
        role = Role.MANAGER if depth < MAX_DEPTH and rng.random() < 0.45 else Role.LEAF
        world.add_member("acme", f"n{i}", parent, role)
        if role == Role.MANAGER:
            issuers[f"n{i}"] = depth
    return world, rng


def rng_size(seed: int) -> int:
    return 4 + seed % 11


def tenant_id(world):
    return world.tenant("acme").tenant_id


def live_members(world):
    return world.members(tenant_id(world), include_revoked=False)


@pytest.mark.parametrize("seed", range(200))
def test_conflict_decision_matches_live_keys(seed):
    world, rng = random_tree(seed)
    below_root = [r for r in world.members(tenant_id(world)) if r.role != Role.ROOT]
    for victim in rng.sample(below_root, k=min(rng.randint(0, 2), len(below_root))):
        if not victim.revoked:
            revoke_member(world, world.parent_of(victim), victim)
    world.run()

    live = live_members(world)
    manager = rng.choice([r for r in live if r.can_issue()])
    others = [r for r in live if r is not manager]
    reused = rng.choice(others) if others and rng.random() < 0.5 else None
    candidate = world.add_external("cand", keys=reused.keys if reused else None)
    world.invite(manager.name, "cand")
    trace_id = initiate_join(world, candidate, manager.public)
    world.run()

    expected = candidate.node_id in {r.node_id for r in live}
    decisions = [line.detail for line in world.trace.select(kind="decision", trace_id=trace_id)]
    assert len(decisions) == 1, f"seed {seed}: decisions {decisions}"
    assert decisions[0].startswith(Verdict.REJECT.value) == expected, (
        f"seed {seed}: {decisions[0]} for {'key of ' + reused.name if reused else 'fresh key'} at {manager.name}")


@pytest.mark.parametrize("seed", range(100))
def test_fuzzed_joins_quiesce_and_probe_once(seed):
    world, rng = random_tree(1000 + seed)
    for record in world.members(tenant_id(world)):
        parent = world.parent_of(record)
        if parent is not None:
            world.set_latency(record.name, parent.name, rng.randint(1, 3))

    issuers = [r for r in live_members(world) if r.can_issue()]
    shared, shared_at = None, set()
    for i in range(rng.randint(1, 4)):
        manager = rng.choice(issuers)
        # a reused key goes to a manager that has not seen it yet
        reuse = shared is not None and manager.name not in shared_at and rng.random() < 0.3
        candidate = world.add_external(f"cand{i}", keys=shared if reuse else None)
        if shared is None or reuse:
            shared = candidate.keys
            shared_at.add(manager.name)
        world.invite(manager.name, candidate.name)
        world.at(rng.randint(0, 6), lambda c=candidate, m=manager: initiate_join(world, c, m.public))
    world.run()

    assert world.simulator.pending() == 0, f"seed {seed}"
    assert world.invariant_failures == [], f"seed {seed}: {world.invariant_failures}"
    assert world.check_invariants() == [], f"seed {seed}"
    probes = Counter((line.dst, line.trace_id) for line in world.trace.select(kind="deliver")
                     if line.msg_type == MsgType.HASH_PROBE.value)
    # at most one upward and one downward copy per node and join
    assert all(n <= 2 for n in probes.values()), f"seed {seed}: {probes.most_common(3)}"
    assert world.trace.count(kind="reject", msg_type=MsgType.HASH_PROBE.value) == 0, f"seed {seed}"
    digests = [r.node_id for r in live_members(world)]
    assert len(digests) == len(set(digests)), f"seed {seed}: duplicate live key"


ATTACKS = ("own_cert", "cert_as_parent", "cert_to_parent", "decision_to_parent", "root_hint")


def attack(world, rng, leaf, parent, trace_id):
    adversary = ensure_adversary(world)
    kind = rng.choice(ATTACKS)
    if kind in ("own_cert", "cert_as_parent"):
        claim = parent.name if kind == "cert_as_parent" else leaf.name
        env = adversary.forge(world, "upgrade_cert", leaf.name, claim, leaf, trace_id)
        adversary.deliver(world, leaf.name, env, MsgType.UPGRADE_CERT.value)
    elif kind == "cert_to_parent":
        env = adversary.forge(world, "upgrade_cert", leaf.name, leaf.name, parent, trace_id)
        adversary.deliver(world, parent.name, env, MsgType.UPGRADE_CERT.value)
    elif kind == "decision_to_parent":
        decision = UpgradeDecision.create(world.provider, leaf, world.salted_hash(leaf.tenant, leaf.public),
                                          world.provider.new_nonce(world.rng), FlagVerdict.APPROVE,
                                          DenyReason.NONE, leaf.node_id, world.now)
        world.send(leaf, leaf.parent, MsgType.UPGRADE_DECISION, {"decision": decision.to_wire()}, trace_id)
    else:
        body = {"leaf_hash": world.salted_hash(leaf.tenant, leaf.public), "desired": Role.ROOT.value}
        world.send(leaf, leaf.parent, MsgType.UPGRADE_HINT, body, trace_id)
    return kind


@pytest.mark.parametrize("seed", range(500))
def test_leaf_cannot_promote_itself(seed):
    world, rng = random_tree(5000 + seed)
    leaves = [r for r in live_members(world) if r.role == Role.LEAF]
    leaf = rng.choice(leaves) if leaves else world.add_member("acme", "extra", "acme-root")
    parent = world.parent_of(leaf)
    ensure_adversary(world).compromise(world, leaf.name)

    tried = []
    for _ in range(rng.randint(1, 4)):
        tried.append(attack(world, rng, leaf, parent, world.new_trace_id()))
        world.run()

    assert leaf.role == Role.LEAF, f"seed {seed}: promoted after {tried}"
    assert parent.children[leaf.public] == Role.LEAF, f"seed {seed}: {tried}"
    assert [r for r in world.issued if r.kind == "upgrade"] == [], f"seed {seed}: {tried}"


@pytest.mark.parametrize("seed", range(50))
def test_compromise_and_revocation_stay_local(seed):
    world, rng = random_tree(9000 + seed, size=rng_size(seed))
    victim = rng.choice([r for r in world.members(tenant_id(world)) if r.role != Role.ROOT])
    report = compromise_containment_check(world, victim.name)
    assert report.ok, f"seed {seed}:\n{report.render()}"

    world, rng = random_tree(9000 + seed, size=rng_size(seed))
    subject = rng.choice([r for r in world.members(tenant_id(world)) if r.role != Role.ROOT])
    locality = revocation_locality(world, world.parent_of(subject).name, subject.name)
    assert locality.ok, f"seed {seed}: {locality.render()}"


def test_balanced_tree_join_message_bound():
    """31 members: root, 2 + 4 + 8 managers, 16 leaves; join at the bottom manager layer."""
    world = make_world()
    world.create_tenant("acme")
    layer = ["acme-root"]
    bottom = layer
    for depth in range(1, 5):
        role = Role.MANAGER if depth < 4 else Role.LEAF
        bottom, layer = layer, []
        for parent in bottom:
            for side in "ab":
                name = f"{parent}{side}" if parent != "acme-root" else f"d{side}"
                world.add_member("acme", name, parent, role)
                layer.append(name)
    assert len(world.members(tenant_id(world))) == 31

    world.add_external("carol")
    manager = bottom[-1]
    world.invite(manager, "carol")
    trace_id = initiate_join(world, world.node("carol"), world.node(manager).public)
    world.run()
    assert world.outcomes[trace_id].status == "approved"
    assert world.trace.count(kind="send", trace_id=trace_id) <= 70
