import pytest

from pvtn.adversary import (
    AdversaryAction,
    AdversaryKind,
    apply_adversary,
    ensure_adversary,
    tamper,
    wire_scan,
)
from pvtn.errors import ModelViolation, ScenarioError
from pvtn.join_protocol import initiate_join
from pvtn.messaging import Envelope, EnvelopeKind, MsgType


def join_carol(world):
    world.add_external("carol")
    world.invite("m1", "carol")
    trace_id = initiate_join(world, world.node("carol"), world.node("m1").public)
    return trace_id


class TestActions:
    def test_from_dict(self):
        action = AdversaryAction.from_dict({"kind": "Drop", "at": 3, "match": "JoinReq", "extra": 1})
        assert action.kind == AdversaryKind.DROP and action.at == 3 and action.match == "JoinReq"

    @pytest.mark.parametrize("data", [
        {"kind": "Teleport"},
        {},
        {"kind": "Inject", "template": "nonsense"},
        {"kind": "Modify", "field": "signature"},
    ])
    def test_bad_actions(self, data):
        with pytest.raises(ScenarioError):
            AdversaryAction.from_dict(data)

    def test_tamper_fields(self):
        env = Envelope(b"\x00" * 32, b"\x01\x02", EnvelopeKind.PLAIN, "00" * 8)
        assert tamper(env, "ciphertext", 1).ciphertext == b"\x01\xfd"
        assert tamper(env, "trace_id", 0).trace_id == "00" * 7 + "01"
        assert tamper(env, "recipient", 0).recipient_digest[0] == 0xFF


class TestPassive:
    def test_outsider_opens_nothing(self, world):
        adversary = ensure_adversary(world)
        join_carol(world)
        world.run()
        assert adversary.captured
        assert adversary.eavesdrop(world) == []
        assert wire_scan(world) == []

    def test_compromise_exposes_victim_traffic_only(self, world):
        adversary = ensure_adversary(world)
        join_carol(world)
        world.run()
        adversary.compromise(world, "l1")
        opened = adversary.eavesdrop(world)
        assert opened
        assert {r.recipient for r in opened} == {"l1"}
        assert adversary.recovered_foreign == opened


class TestActive:
    def test_drop(self, world):
        apply_adversary(world, AdversaryAction(AdversaryKind.DROP, at=0, match=MsgType.JOIN_REQ.value))
        world.run()
        trace_id = join_carol(world)
        world.run()
        assert world.outcomes[trace_id].status == "pending"
        assert world.trace.count(kind="drop", detail="adversary") == 1

    def test_modified_envelope_is_refused(self, world):
        apply_adversary(world, AdversaryAction(AdversaryKind.MODIFY, at=0, match=MsgType.JOIN_REQ.value))
        world.run()
        trace_id = join_carol(world)
        world.run()
        assert world.outcomes[trace_id].status == "pending"
        assert world.trace.count(kind="tamper") == 1
        assert world.trace.count(kind="reject", dst="m1") == 1

    def test_replayed_request_is_refused(self, world):
        adversary = ensure_adversary(world)
        join_carol(world)
        world.run()
        issued = len(world.issued)
        adversary.replay(world, AdversaryAction(AdversaryKind.REPLAY, match=MsgType.JOIN_REQ.value, target="m1"))
        world.run()
        assert world.trace.count(kind="reject", detail="ReplayRejected") == 1
        assert len(world.issued) == issued

    def test_sybils_are_turned_away(self, world):
        apply_adversary(world, AdversaryAction(AdversaryKind.SYBIL_SPAWN, at=1, manager="m1", count=5))
        world.run()
        assert world.trace.count(kind="reject", detail="NotAuthorized") == 5
        assert world.trace.count(msg_type=MsgType.HASH_PROBE.value) == 0
        assert len(world.view(world.tenant("acme").tenant_id).members()) == 6

    def test_forging_needs_the_key(self, world):
        apply_adversary(world, AdversaryAction(AdversaryKind.INJECT, at=1, target="l1", template="decision",
                                               signer="m1"))
        world.run()
        assert world.adversary.violations == ["signing as m1"]
        assert world.trace.count(kind="reject", detail="ModelViolation") == 1

    def test_key_for_unknown_identity(self):
        from pvtn.adversary import Adversary

        adversary = Adversary()
        with pytest.raises(ModelViolation):
            adversary.key_for("root")
