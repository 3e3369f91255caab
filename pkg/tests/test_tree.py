import pytest

from pvtn.errors import IssuerRevoked, NotAManager, NotAuthorized, ScopeExceeded, UpgradeNotApproved
from pvtn.tree import (
    DelegationCertificate,
    DelegationMode,
    NonceCache,
    RevocationReason,
    Role,
    TreeView,
    Validity,
    create_root,
    issue_delegation,
    new_node,
    promote_record,
    revoke,
    rotate_keys,
    scope_contains,
    scope_label,
    tree_problems,
    verify_chain,
    visibility_violations,
)
from pvtn.world import _hexify


def view(world, tenant="acme"):
    return world.view(world.tenant(tenant).tenant_id)


class TestScopes:
    @pytest.mark.parametrize("outer,inner,expected", [
        ("tenant:ab", "tenant:ab", True),
        ("tenant:ab", "tenant:ab:read", True),
        ("tenant:ab:read", "tenant:ab", False),
        ("tenant:ab", "tenant:abc", False),
        ("tenant:ab:read", "tenant:ab:readwrite", False),
    ])
    def test_prefix_containment(self, outer, inner, expected):
        assert scope_contains(outer, inner) is expected

    def test_label(self):
        assert scope_label(b"\xab", "read") == "tenant:ab:read"
        assert scope_label(b"\xab", "") == "tenant:ab"


class TestIssue:
    def test_root_is_trust_anchor(self, provider, rng):
        root = create_root(provider, rng, "r")
        assert root.role == Role.ROOT
        assert root.tenant == root.node_id
        assert root.scope() == f"tenant:{root.node_id.hex()}"

    def test_issue_registers_child(self, provider, rng):
        root = create_root(provider, rng, "r")
        child = new_node(provider, rng, "c")
        cert = issue_delegation(provider, root, child.public, Role.MANAGER, root.scope(),
                                Validity(0, 10), b"n" * 16)
        assert cert.verify(provider, root.public)
        assert root.children[child.public] == Role.MANAGER
        assert child.public in root.known_keys

    def test_leaf_cannot_issue(self, provider, rng):
        leaf = new_node(provider, rng, "l")
        with pytest.raises(NotAManager):
            issue_delegation(provider, leaf, b"x" * 32, Role.LEAF, "", Validity(0, 1), b"n")

    def test_revoked_issuer(self, provider, rng):
        root = create_root(provider, rng, "r")
        root.revoked = True
        with pytest.raises(IssuerRevoked):
            issue_delegation(provider, root, b"x" * 32, Role.LEAF, root.scope(), Validity(0, 1), b"n")

    def test_root_role_cannot_be_delegated(self, provider, rng):
        root = create_root(provider, rng, "r")
        with pytest.raises(NotAuthorized):
            issue_delegation(provider, root, b"x" * 32, Role.ROOT, root.scope(), Validity(0, 1), b"n")

    def test_scope_must_stay_inside_issuer(self, provider, rng):
        root = create_root(provider, rng, "r")
        with pytest.raises(ScopeExceeded):
            issue_delegation(provider, root, b"x" * 32, Role.LEAF, "tenant:other", Validity(0, 1), b"n")

    def test_empty_validity_rejected(self):
        with pytest.raises(ValueError):
            Validity(5, 4)


class TestVerifyChain:
    def test_member_chain_verifies(self, world):
        tree = view(world)
        l1 = world.node("l1")
        chain = tree.chain_of(l1)
        assert [c.role for c in chain] == [Role.MANAGER, Role.LEAF]
        assert verify_chain(world.provider, chain, tree.root.public, world.now)

    def test_wrong_anchor(self, world):
        chain = view(world).chain_of(world.node("l1"))
        assert not verify_chain(world.provider, chain, world.node("m1").public, world.now)

    def test_expired_link(self, world):
        tree = view(world)
        chain = tree.chain_of(world.node("l1"))
        assert not verify_chain(world.provider, chain, tree.root.public, chain[0].validity.not_after + 1)

    def test_revoked_subject(self, world):
        tree = view(world)
        chain = tree.chain_of(world.node("l1"))
        assert not verify_chain(world.provider, chain, tree.root.public, 0, revoked={world.node("m1").node_id})

    def test_link_after_leaf_rejected(self, world):
        tree = view(world)
        m1, l1 = world.node("m1"), world.node("l1")
        chain = tree.chain_of(l1) + [m1.cert]
        assert not verify_chain(world.provider, chain, tree.root.public, 0)

    def test_empty_chain(self, world):
        assert not verify_chain(world.provider, [], view(world).root.public, 0)

    def test_json_form_verifies(self, world):
        tree = view(world)
        chain = [DelegationCertificate.from_json(_hexify(c.to_wire())) for c in tree.chain_of(world.node("l1"))]
        assert chain == tree.chain_of(world.node("l1"))
        assert verify_chain(world.provider, chain, tree.root.public, 0)


class TestRevoke:
    def test_subtree_revoked_only(self, world):
        m1 = world.node("m1")
        notice, affected = revoke(world.provider, world.node("acme-root"), m1.public,
                                  RevocationReason.TERMINATION, view(world), 3)
        assert {r.name for r in affected} == {"m1", "l1", "l2"}
        assert all(world.node(n).revoked for n in ("m1", "l1", "l2"))
        assert not world.node("m2").revoked and not world.node("l3").revoked
        assert notice.issued_at == 3
        assert m1.node_id in world.node("acme-root").revocations
        assert m1.node_id not in world.node("m2").revocations

    def test_compromise_replicates_tenant_wide(self, world):
        revoke(world.provider, world.node("acme-root"), world.node("m1").public,
               RevocationReason.COMPROMISE, view(world), 3)
        assert world.node("m1").node_id in world.node("l3").revocations

    def test_manager_must_be_ancestor(self, world):
        with pytest.raises(NotAuthorized):
            revoke(world.provider, world.node("m2"), world.node("l1").public,
                   RevocationReason.TERMINATION, view(world), 3)

    def test_revoked_manager_cannot_revoke(self, world):
        world.node("m1").revoked = True
        with pytest.raises(IssuerRevoked):
            revoke(world.provider, world.node("m1"), world.node("l1").public,
                   RevocationReason.TERMINATION, view(world), 3)


class TestRotate:
    def test_rotation_reissues_children(self, world):
        m1 = world.node("m1")
        old = m1.public
        keys, reissued = rotate_keys(world.provider, world.rng, m1, view(world), 7, 100)
        assert keys.public != old
        assert len(reissued) == 2
        for name in ("l1", "l2"):
            child = world.node(name)
            assert child.parent == m1.public
            assert old not in child.known_keys
            assert child.cert.verify(world.provider, m1.public)
        root = world.node("acme-root")
        assert m1.public in root.children and old not in root.children
        assert m1.cert.verify(world.provider, root.public)

    def test_rotation_leaves_others_untouched(self, world):
        before = {n: world.node(n).snapshot() for n in ("m2", "l3")}
        rotate_keys(world.provider, world.rng, world.node("m1"), view(world), 7, 100)
        assert {n: world.node(n).snapshot() for n in ("m2", "l3")} == before

    def test_old_certificates_retire_at_rotation(self, world):
        m1 = world.node("m1")
        old_cert = world.node("l1").cert
        old_digest = m1.node_id
        rotate_keys(world.provider, world.rng, m1, view(world), 7, 100)
        tree = view(world)
        assert tree.retired()[old_digest] == 7
        stale = [world.node("m1").cert, old_cert]
        assert not verify_chain(world.provider, stale, tree.root.public, 8, retired=tree.retired())

    def test_full_path_chains_rebuilt(self):
        from tests.conftest import make_world
        w = make_world()
        w.create_tenant("fp", mode=DelegationMode.FULL_PATH)
        w.add_member("fp", "m", "fp-root", Role.MANAGER)
        w.add_member("fp", "c", "m")
        m = w.node("m")
        rotate_keys(w.provider, w.rng, m, view(w, "fp"), 2, 100, DelegationMode.FULL_PATH)
        assert w.node("c").cert_chain == [m.cert, w.node("c").cert]

    def test_leaf_cannot_rotate(self, world):
        with pytest.raises(NotAManager):
            rotate_keys(world.provider, world.rng, world.node("l1"), view(world), 1, 10)


class TestStructure:
    def test_well_formed(self, world):
        assert tree_problems(view(world)) == []
        assert all(not visibility_violations(r) for r in world.nodes.values())

    def test_depth_and_height(self, world):
        tree = view(world)
        assert tree.depth(world.node("l1")) == 2
        assert tree.height() == 2
        assert [r.name for r in tree.subtree(world.node("m1"))] == ["m1", "l1", "l2"]

    def test_extra_key_is_a_violation(self, world):
        l1 = world.node("l1")
        l1.known_keys.add(world.node("l3").public)
        assert visibility_violations(l1) == {world.node("l3").public}

    def test_duplicate_key_detected(self, world):
        world.add_member("acme", "dup", "m2", keys=world.node("l1").keys)
        assert any("duplicate key digest" in p for p in tree_problems(view(world)))

    def test_dump_lines(self, world):
        lines = view(world).dump().splitlines()
        assert len(lines) == 6
        assert lines[0].split()[1] == "root"

    def test_promotion_needs_approval(self, world):
        m1, l1 = world.node("m1"), world.node("l1")
        with pytest.raises(UpgradeNotApproved):
            promote_record(m1, l1.public, l1)
        m1.proto.upgrade_approvals.add(l1.public)
        promote_record(m1, l1.public, l1)
        assert l1.role == Role.MANAGER and m1.children[l1.public] == Role.MANAGER
        with pytest.raises(UpgradeNotApproved):
            promote_record(m1, l1.public, l1)


def test_nonce_cache_is_bounded():
    cache = NonceCache(2)
    for nonce in (b"a", b"b", b"c"):
        cache.add(nonce)
    assert len(cache) == 2
    assert b"a" not in cache and b"c" in cache


def test_tree_view_prefers_live_record(world):
    records = list(world.members(world.tenant("acme").tenant_id))
    assert TreeView(world.provider, records).root.name == "acme-root"
