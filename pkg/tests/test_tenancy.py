import pytest

from pvtn.errors import NotAManager, ScopeExceeded
from pvtn.lifecycle import revoke_member
from pvtn.tenancy import (
    CrossTenantDelegation,
    Policy,
    bridge_access_check,
    check_isolation,
    check_snapshot_isolation,
    create_bridge,
)
from pvtn.tree import RevocationReason


def ids(world):
    return world.tenant("acme").tenant_id, world.tenant("globex").tenant_id


@pytest.fixture
def bridged(two_tenant_world):
    """am1 of acme grants gl1 of globex read access for 30 ticks."""
    w = two_tenant_world
    bridge = create_bridge(w, w.node("am1"), w.node("gl1").public, w.tenant("acme").scope("read"), 30)
    return w, bridge


class TestPolicy:
    def test_merge_replaces_named_keys_only(self):
        merged = Policy(max_depth=4).merged({"quota": 2, "deny_scopes": ["tenant:ab:admin"]})
        assert merged == Policy(max_depth=4, quota=2, deny_scopes=("tenant:ab:admin",))

    def test_deny_covers_narrower_scopes(self):
        policy = Policy(deny_scopes=("tenant:ab:admin",))
        assert policy.denies("tenant:ab:admin")
        assert not policy.denies("tenant:ab:read")

    def test_override_wins(self, world):
        tenant = world.tenant("acme")
        tenant.overrides["m1"] = Policy(quota=1)
        assert world.policy_for(world.node("m1")).quota == 1
        assert world.policy_for(world.node("m2")).quota is None


class TestRegistry:
    def test_tenants_get_distinct_ids_and_salts(self, two_tenant_world):
        acme, globex = two_tenant_world.tenant("acme"), two_tenant_world.tenant("globex")
        assert acme.tenant_id != globex.tenant_id
        assert acme.salt != globex.salt
        assert acme.tenant_id == two_tenant_world.node("acme-root").node_id

    def test_duplicate_tenant_rejected(self, two_tenant_world):
        with pytest.raises(ValueError):
            two_tenant_world.tenancy.add(two_tenant_world.tenant("acme"))

    def test_scope_labels(self, two_tenant_world):
        tenant = two_tenant_world.tenant("acme")
        assert tenant.scope() == f"tenant:{tenant.tenant_id.hex()}"
        assert tenant.scope("read") == f"tenant:{tenant.tenant_id.hex()}:read"


class TestBridges:
    def test_subject_granted_within_scope(self, bridged):
        w, bridge = bridged
        acme, _ = ids(w)
        assert bridge_access_check(w, bridge, w.node("gl1"), acme, w.tenant("acme").scope("read"), "read") == (True, "ok")

    @pytest.mark.parametrize("presenter,permission,action,reason", [
        ("gm1", "read", "read", "NotSubject"),
        ("gl1", "write", "read", "ScopeExceeded"),
        ("gl1", "read", "delete", "ActionNotPermitted"),
    ])
    def test_denials(self, bridged, presenter, permission, action, reason):
        w, bridge = bridged
        acme, _ = ids(w)
        granted, got = bridge_access_check(w, bridge, w.node(presenter), acme,
                                           w.tenant("acme").scope(permission), action)
        assert not granted and got == reason

    def test_bridge_is_tenant_bound(self, bridged):
        w, bridge = bridged
        _, globex = ids(w)
        assert bridge_access_check(w, bridge, w.node("gl1"), globex, bridge.scope, "read") == (False, "ForeignBridge")

    def test_expiry(self, bridged):
        w, bridge = bridged
        acme, _ = ids(w)
        results = []
        w.at(31, lambda: results.append(bridge_access_check(w, bridge, w.node("gl1"), acme, bridge.scope, "read")))
        w.run()
        assert results == [(False, "Expired")]

    def test_revoking_issuer_voids_bridge(self, bridged):
        w, bridge = bridged
        acme, _ = ids(w)
        revoke_member(w, w.node("acme-root"), w.node("am1"), RevocationReason.TERMINATION)
        w.run()
        granted, _ = bridge_access_check(w, bridge, w.node("gl1"), acme, bridge.scope, "read")
        assert not granted

    def test_bridge_adds_nothing_to_the_tree(self, bridged):
        w, _ = bridged
        assert w.node("gl1").public not in w.node("am1").children
        assert w.node("gl1").tenant == w.tenant("globex").tenant_id

    def test_leaf_cannot_bridge(self, two_tenant_world):
        w = two_tenant_world
        with pytest.raises(NotAManager):
            create_bridge(w, w.node("al1"), w.node("gl1").public, w.tenant("acme").scope(), 10)

    def test_scope_outside_issuer(self, two_tenant_world):
        w = two_tenant_world
        with pytest.raises(ScopeExceeded):
            create_bridge(w, w.node("am1"), w.node("gl1").public, w.tenant("globex").scope(), 10)

    def test_wire_form(self, bridged):
        _, bridge = bridged
        assert CrossTenantDelegation.from_wire(bridge.to_wire()) == bridge


class TestIsolation:
    def test_separate_tenants_are_isolated(self, two_tenant_world):
        report = check_isolation(two_tenant_world)
        assert report.ok
        assert report.attempts
        assert {a.operation for a in report.attempts} >= {"join", "verify", "enumerate"}

    def test_bridge_success_is_a_trust_event(self, bridged):
        w, _ = bridged
        report = check_isolation(w)
        assert report.ok
        granted = [a for a in report.attempts if a.operation == "bridge" and a.outcome == "ok"]
        assert [a.actor for a in granted] == ["gl1"]
        assert all(a.allowed for a in granted)
        assert "(trust event)" in granted[0].render()

    def test_leaked_member_key_is_a_violation(self, two_tenant_world):
        w = two_tenant_world
        w.node("gl1").known_keys.add(w.node("am1").public)
        report = check_isolation(w)
        assert not report.ok
        assert [(v.actor, v.operation) for v in report.violations] == [("gl1", "join"), ("gl1", "enumerate")]
        assert "VIOLATION" in report.render()

    def test_disclosed_key_is_allowed(self, two_tenant_world):
        w = two_tenant_world
        w.disclose("gl1", "am1")
        assert check_isolation(w).ok

    def test_snapshot_isolation(self, two_tenant_world):
        snapshot = two_tenant_world.snapshot()
        assert check_snapshot_isolation(snapshot).ok
        acme_root = next(n for n in snapshot["tenants"][0]["nodes"] if n["role"] == "root")
        globex_leaf = next(n for n in snapshot["tenants"][1]["nodes"] if n["name"] == "gl1")
        globex_leaf["known_keys"].append(acme_root["digest"])
        report = check_snapshot_isolation(snapshot)
        assert not report.ok
        assert {v.operation for v in report.violations} == {"enumerate", "verify"}
