"""
Lifecycle Module for PVTN

Membership changes after admission:
- revoke_member / leave: revoke a member and its subtree; a Compromise
  notice climbs hop by hop to the root and is then sent down to every member
- rotate_member_keys: periodic key rotation with per-child announcements
- refresh_chains: FullPath chain refresh below a rotated manager
"""

import logging
from typing import TYPE_CHECKING, Optional

from pvtn.crypto import fingerprint
from pvtn.errors import NoParent, NotAuthorized
from pvtn.messaging import ControlPayload, Envelope, MsgType
from pvtn.tree import (
    DelegationCertificate,
    DelegationMode,
    NodeRecord,
    RevocationNotice,
    RevocationReason,
    Role,
    refresh_chain,
    revoke,
    rotate_keys,
)

if TYPE_CHECKING:
    from pvtn.world import World


def revoke_member(world: "World", manager: NodeRecord, subject: NodeRecord,
                  reason: RevocationReason = RevocationReason.TERMINATION) -> RevocationNotice:
    """
    Revoke subject and everything below it.

    Raises:
        NotAuthorized: subject is not below manager
        IssuerRevoked: manager itself is revoked
    """
    view = world.view(manager.tenant)
    notice, affected = revoke(world.provider, manager, subject.public, reason, view, world.now, propagate=False)
    digests = sorted(r.node_id for r in affected)
    trace_id = world.new_trace_id()
    world.trace.add(world.now, "revoke", manager.name, subject.name, MsgType.REVOCATION_NOTICE.value, trace_id,
                    f"{reason.value} affected={len(affected)}")

    if reason == RevocationReason.COMPROMISE:
        body = {"notice": notice.to_wire(), "digests": digests, "direction": "up"}
        if manager.role == Role.ROOT:
            _disseminate(world, manager, body, trace_id)
        else:
            world.send(manager, manager.parent, MsgType.REVOCATION_NOTICE, body, trace_id)
    return notice


def leave(world: "World", member: NodeRecord) -> RevocationNotice:
    """Voluntary leave: the direct parent revokes the member."""
    parent = world.parent_of(member)
    if parent is None:
        raise NoParent(f"{member.name} has no parent to leave")
    member.audit(world.now, "leave")
    return revoke_member(world, parent, member, RevocationReason.VOLUNTARY_LEAVE)


def _disseminate(world: "World", node: NodeRecord, body: dict, trace_id: str) -> None:
    down = {**body, "direction": "down"}
    for child_pk in list(node.children):
        if world.provider.hash(child_pk) in node.revocations:
            continue
        world.send(node, child_pk, MsgType.REVOCATION_NOTICE, down, trace_id)


def _on_revocation_notice(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    digests = {bytes(d) for d in payload.body["digests"]}
    direction = payload.body["direction"]
    sender_digest = payload.sender_digest
    if direction == "up":
        child_digests = {world.provider.hash(pk) for pk in node.children}
        if sender_digest not in child_digests:
            raise NotAuthorized(f"revocation notice at {node.name} not from a child")
        # a child may only report digests from below itself
        outside = (child_digests - {sender_digest}) | {node.node_id}
        if node.parent is not None:
            outside.add(world.provider.hash(node.parent))
        if digests & outside:
            raise NotAuthorized(f"revocation notice at {node.name} names members outside the sender's subtree")
    elif node.parent is None or payload.signer_pk != node.parent:
        raise NotAuthorized(f"revocation notice at {node.name} not from its parent")

    node.revocations |= digests
    node.audit(world.now, "revocation", f"{direction} {len(digests)}")
    if direction == "up" and node.parent is not None:
        world.send(node, node.parent, MsgType.REVOCATION_NOTICE, payload.body, payload.trace_id)
    else:
        _disseminate(world, node, payload.body, payload.trace_id)


def rotate_member_keys(world: "World", manager: NodeRecord) -> list:
    """
    Rotate a manager's keys and announce the change to each child.

    Returns:
        list: reissued DelegationCertificates, one per live direct child
    """
    old_pk = manager.public
    tenant = world.tenant_of(manager)
    mode = tenant.mode if tenant is not None else DelegationMode.HIERARCHICAL_ONLY
    view = world.view(manager.tenant)
    children = [c for c in view.children_of(manager) if not c.revoked]
    _, reissued = rotate_keys(world.provider, world.rng, manager, view, world.now,
                              world.settings.cert_validity, mode)
    trace_id = world.new_trace_id()
    world.trace.add(world.now, "rotate", manager.name, "", MsgType.KEY_ROTATION.value, trace_id,
                    f"reissued={len(reissued)}")

    _update_gateway_keys(world, manager, old_pk)
    for child, cert in zip(children, reissued):
        body = {"public": manager.public, "cert": cert.to_wire()}
        world.send(manager, child.public, MsgType.KEY_ROTATION, body, trace_id)
    if mode == DelegationMode.FULL_PATH:
        refresh_chains(world, manager, trace_id)
    return reissued


def _update_gateway_keys(world: "World", manager: NodeRecord, old_pk: bytes) -> None:
    """Keep the gateway's routing handle and members' gateway keys current."""
    tenant = world.tenant_of(manager)
    if tenant is None or not tenant.gateway:
        return
    gw = world.node(tenant.gateway)
    if manager.role == Role.ROOT and gw is not manager and old_pk in gw.known_keys:
        gw.known_keys.discard(old_pk)
        gw.disclosed.discard(old_pk)
        gw.known_keys.add(manager.public)
        gw.disclosed.add(manager.public)
    if manager.is_gateway:
        for member in world.members(tenant.tenant_id):
            if member.gateway_pk == old_pk:
                member.gateway_pk = manager.public


def refresh_chains(world: "World", manager: NodeRecord, trace_id: Optional[str] = None) -> None:
    """FullPath: send each live child its parent's current chain."""
    trace_id = trace_id or world.new_trace_id()
    for child_pk in list(manager.children):
        if world.provider.hash(child_pk) in manager.revocations:
            continue
        chain = [c.to_wire() for c in (manager.cert_chain or [])]
        world.send(manager, child_pk, MsgType.CHAIN_REFRESH, {"chain": chain}, trace_id)


def _on_key_rotation(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    new_pk = bytes(payload.body["public"])
    cert = DelegationCertificate.from_wire(payload.body["cert"])
    if new_pk != node.parent or payload.signer_pk != new_pk:
        raise NotAuthorized(f"rotation announcement at {node.name} does not come from its parent")
    if cert.subject_pk != node.public or not cert.verify(world.provider, new_pk):
        raise NotAuthorized("reissued certificate does not verify under the announced key")
    node.audit(world.now, "parent_rotated", fingerprint(world.provider.hash(new_pk)))


def _on_chain_refresh(world: "World", node: NodeRecord, payload: ControlPayload, env: Envelope) -> None:
    if node.parent is None or payload.signer_pk != node.parent:
        raise NotAuthorized(f"chain refresh at {node.name} not from its parent")
    chain = [DelegationCertificate.from_wire(c) for c in payload.body["chain"]]
    if chain and chain[-1].subject_pk != node.parent:
        raise NotAuthorized("refreshed chain does not end in the parent's certificate")
    refresh_chain(node, chain)
    node.audit(world.now, "chain_refresh", str(len(node.cert_chain or [])))
    if node.can_issue():
        refresh_chains(world, node, payload.trace_id)
    logging.debug(f"{node.name} refreshed its chain ({len(node.cert_chain or [])} links)")


def install(world: "World") -> None:
    world.on(MsgType.REVOCATION_NOTICE, _on_revocation_notice)
    world.on(MsgType.KEY_ROTATION, _on_key_rotation)
    world.on(MsgType.CHAIN_REFRESH, _on_chain_refresh)
