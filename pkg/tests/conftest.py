import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pvtn.crypto import MockProvider, RealProvider
from pvtn.tree import Role
from pvtn.world import Settings, World

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIO_DIR = os.path.join(ROOT_DIR, "scenarios")


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def provider():
    return MockProvider(7)


@pytest.fixture
def real_provider():
    return RealProvider()


@pytest.fixture(params=["mock", "real"])
def any_provider(request):
    return MockProvider(7) if request.param == "mock" else RealProvider()


def make_world(seed: int = 11, **settings) -> World:
    return World(MockProvider(seed), seed, Settings(**settings))


@pytest.fixture
def world():
    """
    One tenant:

        acme-root
        ├── m1 (manager) ── l1, l2
        └── m2 (manager) ── l3
    """
    w = make_world()
    w.create_tenant("acme")
    w.add_member("acme", "m1", "acme-root", Role.MANAGER)
    w.add_member("acme", "m2", "acme-root", Role.MANAGER)
    w.add_member("acme", "l1", "m1")
    w.add_member("acme", "l2", "m1")
    w.add_member("acme", "l3", "m2")
    return w


@pytest.fixture
def gated_world(world):
    """The acme world behind gateway gw, with storage vault and an outside validator val."""
    world.add_external("gw")
    world.set_gateway("acme", "gw")
    world.add_storage("vault", "gw")
    world.add_external("val")
    world.disclose("val", "gw")
    world.disclose("l1", "vault")
    world.disclose("l2", "vault")
    return world


def certify(world, member: str, permission: str = "read"):
    """Run the action protocol for one member and return its certificate."""
    from pvtn.action_protocol import request_action_cert

    trace_id = request_action_cert(world, world.node(member), world.tenant("acme").scope(permission))
    world.run()
    assert world.outcomes[trace_id].status == "approved"
    return world.node(member).proto.action_certs[-1]


@pytest.fixture
def two_tenant_world():
    w = make_world(seed=5)
    w.create_tenant("acme")
    w.add_member("acme", "am1", "acme-root", Role.MANAGER)
    w.add_member("acme", "al1", "am1")
    w.create_tenant("globex")
    w.add_member("globex", "gm1", "globex-root", Role.MANAGER)
    w.add_member("globex", "gl1", "gm1")
    return w


def scenario_path(*parts: str) -> str:
    return os.path.join(SCENARIO_DIR, *parts)
