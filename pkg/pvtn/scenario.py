"""
Scenario Module for PVTN

Runs one scenario file end to end:
- load_scenario: YAML parsing plus JSON-schema validation; problems are
  ScenarioErrors that carry a file location
- build_world: tenants, bootstrap members, externals, gateways, storage, links
- Script: timed protocol directives (join, upgrade, action, validate, ...)
- schedule_adversary: timed AdversaryActions
- evaluate: embedded expectations plus the global invariants
- run_scenario: all of the above, the golden comparison, and the trace,
  report and snapshot files

Exit codes: 0 pass, 1 assertion/invariant/golden failure, 2 invalid scenario.
"""

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import yaml
from jsonschema import Draft7Validator
from jsonschema.exceptions import best_match

import config
from pvtn import action_protocol, gateway, join_protocol, lifecycle, tenancy, upgrade_protocol
from pvtn.adversary import (
    AdversaryAction,
    apply_adversary,
    compromise_containment_check,
    ensure_adversary,
    revocation_locality,
    rotation_locality,
    storage_exposure,
    wire_scan,
)
from pvtn.crypto import make_provider
from pvtn.errors import InvariantViolation, NonTermination, PvtnError, ScenarioError
from pvtn.overlay import RouteMode, diff_traces
from pvtn.tenancy import Policy, check_isolation
from pvtn.tree import DelegationMode, RevocationReason, Role, scope_label
from pvtn.world import Settings, World
from utils.golden import get_golden, get_golden_key, save_golden, trace_digest
from utils.helpers import format_report

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2

# Script fields that name a node (or a storage node)
NODE_FIELDS = ("candidate", "manager", "node", "leaf", "validator", "subject", "issuer",
               "presenter", "receiver", "owner", "storage", "gateway")
# Script fields that refer to an earlier directive by label
LABEL_FIELDS = ("cert", "bridge")


@dataclass
class RunFlags:
    """Command-line overrides for one run."""

    seed: Optional[int] = None
    provider: str = config.PROVIDER
    max_ticks: Optional[int] = None
    trace_path: Optional[str] = None
    snapshot_path: Optional[str] = None
    runs_dir: str = config.RUNS_DIR
    golden_dir: str = config.GOLDEN_DIR
    bless: bool = False
    write_files: bool = True


@dataclass
class ScenarioResult:
    path: str
    name: str = ""
    seed: int = 0
    provider: str = "mock"
    exit_code: int = EXIT_OK
    trace: str = ""
    ticks: int = 0
    checks: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    diff: list = field(default_factory=list)
    snapshot: Optional[dict] = None
    world: Optional[World] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.exit_code == EXIT_OK

    @property
    def digest(self) -> str:
        return trace_digest(self.trace) if self.trace else ""

    def check(self, label: str, ok: bool, detail: str = "") -> bool:
        self.checks.append((label, ok, detail))
        if not ok:
            self.failures.append(f"{label}: {detail}" if detail else label)
        return ok

    def report(self) -> str:
        text = format_report(self.name or self.path, self.checks, self.failures)
        if self.diff:
            text += "\n" + "\n".join(self.diff)
        return text


@contextmanager
def located(location: str):
    """Attach a location to ScenarioErrors raised without one."""
    try:
        yield
    except ScenarioError as e:
        if e.location:
            raise
        raise ScenarioError(str(e), location) from e


# Loading

def load_schema(schema_file: str = config.SCHEMA_FILE) -> dict:
    with open(schema_file, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_scenario(path: str, schema: Optional[dict] = None) -> dict:
    """
    Parse and validate a scenario file.

    Args:
        path (str): YAML scenario file
        schema (dict, optional): JSON schema; the bundled one by default

    Returns:
        dict: the scenario document

    Raises:
        ScenarioError: unreadable file, YAML syntax error or schema violation
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = yaml.safe_load(f)
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e}", path) from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        location = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else path
        raise ScenarioError(f"YAML syntax error: {getattr(e, 'problem', None) or e}", location) from e

    if not isinstance(doc, dict):
        raise ScenarioError("a scenario must be a mapping", path)
    error = best_match(Draft7Validator(schema or load_schema()).iter_errors(doc))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "(top level)"
        raise ScenarioError(error.message, f"{path}:{where}")
    return doc


# World construction

def _shared_keys(world: World, spec: dict):
    name = spec.get("same_keys_as")
    if not name:
        return None
    if name not in world.nodes:
        raise ScenarioError(f"same_keys_as names unknown node '{name}'")
    return world.node(name).keys


def _policy(record, base: Policy, data: dict) -> Policy:
    """Merge a policy block; deny_scopes name permissions inside the tenant."""
    if "deny_scopes" in data:
        data = dict(data, deny_scopes=[record.scope(p) for p in data["deny_scopes"]])
    return base.merged(data)


def build_world(doc: dict, flags: RunFlags) -> World:
    """
    Build the initial world of a scenario.

    Order: tenants with their bootstrap members, externals, gateways and
    storage, links, adversary identities.
    """
    seed = flags.seed if flags.seed is not None else doc.get("seed", config.SEED)
    settings = Settings(**doc.get("settings", {}))
    if flags.max_ticks is not None:
        settings.max_ticks = flags.max_ticks
    world = World(make_provider(flags.provider, seed), seed, settings)

    tenants = doc.get("tenants", [])
    for i, spec in enumerate(tenants):
        with located(f"tenants[{i}]"):
            record = world.create_tenant(spec["name"], spec.get("root"),
                                         DelegationMode(spec.get("mode", "hierarchical")), Policy())
            record.policy = policy = _policy(record, Policy(), spec.get("policy", {}))
            for j, member in enumerate(spec.get("members", [])):
                with located(f"tenants[{i}].members[{j}]"):
                    world.add_member(spec["name"], member["name"], member.get("parent", record.root_name),
                                     Role(member.get("role", "leaf")), member.get("permission"),
                                     _shared_keys(world, member))
            for node_name, data in spec.get("overrides", {}).items():
                if node_name not in world.nodes:
                    raise ScenarioError(f"policy override for unknown node '{node_name}'")
                record.overrides[node_name] = _policy(record, policy, data)

    for i, spec in enumerate(doc.get("externals", [])):
        with located(f"externals[{i}]"):
            world.add_external(spec["name"], _shared_keys(world, spec))

    for i, spec in enumerate(tenants):
        with located(f"tenants[{i}]"):
            gw = spec.get("gateway")
            if gw:
                if gw not in world.nodes:
                    world.add_external(gw)
                world.set_gateway(spec["name"], gw)
            for store in spec.get("storage", []):
                if not gw:
                    raise ScenarioError(f"storage '{store['name']}' needs a tenant gateway")
                world.add_storage(store["name"], gw)

    for i, link in enumerate(doc.get("links", [])):
        with located(f"links[{i}]"):
            for end in (link["a"], link["b"]):
                if end not in world.nodes and end not in world.storage:
                    raise ScenarioError(f"link names unknown node '{end}'")
            world.set_latency(link["a"], link["b"], link["latency"])

    if "adversary" in doc:
        adversary = ensure_adversary(world)
        for i, name in enumerate(doc["adversary"].get("identities", [])):
            with located(f"adversary.identities[{i}]"):
                adversary.adopt(world.node(name))

    logging.info(f"Built world: {len(world.tenancy.all())} tenant(s), {len(world.nodes)} node(s), "
                 f"{len(world.storage)} storage node(s), seed {seed}")
    return world


# Protocol script

class Script:
    """
    Timed protocol directives of one scenario.

    Each directive gets a label (its own, or "<op>-<index>"). Directives that
    start a protocol run remember the run's trace id under the label, so
    expectations and later directives (validate, storage, bridge_check) can
    refer to them.
    """

    def __init__(self, world: World):
        self.world = world
        self.runs: dict = {}
        self.errors: dict = {}
        self.completed: set = set()
        self.bridges: dict = {}
        self.ops: dict = {}

    def schedule(self, directives: list) -> None:
        """Validate references and queue every directive at its tick."""
        seen = set()
        for i, op in enumerate(directives):
            where = f"script[{i}]"
            label = op.get("label") or f"{op['op']}-{i}"
            if label in seen:
                raise ScenarioError(f"duplicate label '{label}'", where)
            self._check_references(op, seen, where)
            seen.add(label)
            self.ops[label] = op
            handler = getattr(self, f"op_{op['op']}")
            self.world.at(op.get("at", 0), lambda h=handler, o=op, name=label: self._run(h, o, name), label=label)

    def _check_references(self, op: dict, labels: set, where: str) -> None:
        world = self.world
        for key in NODE_FIELDS:
            name = op.get(key)
            if name and name not in world.nodes and name not in world.storage:
                raise ScenarioError(f"unknown node '{name}'", f"{where}.{key}")
        for key in LABEL_FIELDS:
            if key in op and op[key] not in labels:
                raise ScenarioError(f"'{op[key]}' does not name an earlier directive", f"{where}.{key}")
        if "tenant" in op and world.tenancy.named(op["tenant"]) is None:
            raise ScenarioError(f"unknown tenant '{op['tenant']}'", f"{where}.tenant")

    def _run(self, handler, op: dict, label: str) -> None:
        try:
            result = handler(op, label)
        except PvtnError as e:
            self.errors[label] = type(e).__name__
            raise
        if isinstance(result, str):
            self.runs[label] = result
        else:
            self.completed.add(label)

    def _scope(self, record, permission: str) -> str:
        if record.tenant is None:
            return permission
        return scope_label(record.tenant, permission)

    def _certificate(self, label: str) -> tuple:
        world = self.world
        outcome = world.outcomes.get(self.runs.get(label, ""))
        if outcome is None or outcome.status != "approved":
            raise ScenarioError(f"no action certificate was issued for '{label}'")
        holder = world.node(outcome.subject)
        nonce = outcome.detail.get("nonce")
        cert = next((c for c in holder.proto.action_certs if c.proposal.nonce.hex() == nonce), None)
        if cert is None:
            raise ScenarioError(f"{holder.name} does not hold the certificate of '{label}'")
        return cert, holder

    # Directives

    def op_invite(self, op: dict, label: str) -> None:
        self.world.invite(op["manager"], op["candidate"])

    def op_disclose(self, op: dict, label: str) -> None:
        self.world.disclose(op["receiver"], op["owner"])

    def op_join(self, op: dict, label: str) -> str:
        world = self.world
        return join_protocol.initiate_join(world, world.node(op["candidate"]), world.public_key_of(op["manager"]),
                                           RouteMode(op.get("route", "direct_ip")), op.get("info", "member"))

    def op_upgrade(self, op: dict, label: str) -> Optional[str]:
        return upgrade_protocol.leaf_request_upgrade(self.world, self.world.node(op["leaf"]),
                                                     Role(op.get("desired", "manager")))

    def op_action(self, op: dict, label: str) -> str:
        node = self.world.node(op["node"])
        return action_protocol.request_action_cert(self.world, node, self._scope(node, op.get("permission", "")))

    def op_validate(self, op: dict, label: str) -> str:
        world = self.world
        cert, holder = self._certificate(op["cert"])
        tenant = world.tenant_of(holder)
        gw = op.get("gateway") or (tenant.gateway if tenant else None)
        if not gw:
            raise ScenarioError(f"no gateway serves the tenant of {holder.name}")
        return action_protocol.validate_action(world, world.node(op["validator"]), self._scope(holder, op["action"]),
                                               cert, world.public_key_of(gw))

    def op_storage(self, op: dict, label: str) -> str:
        cert, holder = self._certificate(op["cert"])
        presenter = self.world.node(op.get("node") or holder.name)
        return gateway.storage_request(self.world, presenter, op["storage"], cert)

    def op_revoke(self, op: dict, label: str) -> None:
        world = self.world
        lifecycle.revoke_member(world, world.node(op["manager"]), world.node(op["subject"]),
                                RevocationReason(op.get("reason", "termination")))

    def op_leave(self, op: dict, label: str) -> None:
        lifecycle.leave(self.world, self.world.node(op["node"]))

    def op_rotate(self, op: dict, label: str) -> None:
        lifecycle.rotate_member_keys(self.world, self.world.node(op["manager"]))

    def op_refresh(self, op: dict, label: str) -> None:
        lifecycle.refresh_chains(self.world, self.world.node(op["manager"]))

    def op_bridge(self, op: dict, label: str) -> None:
        world = self.world
        issuer = world.node(op["issuer"])
        self.bridges[label] = tenancy.create_bridge(
            world, issuer, world.public_key_of(op["subject"]), self._scope(issuer, op.get("permission", "")),
            op.get("duration", world.settings.cert_validity), tuple(op.get("actions", ["read"])),
        )

    def op_bridge_check(self, op: dict, label: str) -> str:
        world = self.world
        bridge = self.bridges.get(op["bridge"])
        if bridge is None:
            raise ScenarioError(f"bridge '{op['bridge']}' was never issued")
        presenter = world.node(op["presenter"])
        target = world.tenant(op["tenant"]).tenant_id if "tenant" in op else bridge.issuer_tenant
        scope = scope_label(bridge.issuer_tenant, op["permission"]) if "permission" in op else bridge.scope
        granted, reason = tenancy.bridge_access_check(world, bridge, presenter, target, scope,
                                                      op.get("action", "read"))
        trace_id = world.new_trace_id()
        outcome = world.outcome(trace_id, "bridge", presenter.name)
        outcome.status = "granted" if granted else "denied"
        outcome.reason = "" if granted else reason
        world.trace.add(world.now, "bridge", presenter.name, "", "", trace_id,
                        "grant" if granted else f"deny {reason}")
        return trace_id

    # Results

    def result(self, label: str) -> tuple:
        """(status, reason, error class) of a labelled directive."""
        error = self.errors.get(label, "")
        if label in self.runs:
            outcome = self.world.outcomes.get(self.runs[label])
            if outcome is not None:
                return outcome.status, outcome.reason, error
        if error:
            return "error", "", error
        if label in self.completed:
            return "done", "", ""
        return "not run", "", ""


def schedule_adversary(world: World, spec: dict) -> list:
    """Queue the adversary script; names are checked before anything runs."""
    events = []
    for i, data in enumerate(spec.get("actions", [])):
        with located(f"adversary.actions[{i}]"):
            action = AdversaryAction.from_dict(data)
            for name in (action.target, action.signer, action.manager):
                if name and name not in world.nodes and name not in world.storage:
                    raise ScenarioError(f"unknown node '{name}'")
            events.append(apply_adversary(world, action))
    return events


# Expectations

def _check_counts(result: ScenarioResult, label: str, wanted: dict, counter, compare) -> None:
    for key, limit in wanted.items():
        got = counter(key)
        result.check(f"{label} {key}", compare(got, limit), f"got {got}, expected {limit}")


def evaluate(world: World, script: Script, expect: dict, result: ScenarioResult) -> None:
    """
    Check a finished run against its expectations.

    Read-only expectations come first; containment and locality checks run
    further protocol traffic and therefore come last.
    """
    with located("expect"):
        for label, wanted in expect.get("outcomes", {}).items():
            if label not in script.ops:
                raise ScenarioError(f"outcome for unknown label '{label}'")
            status, reason, error = script.result(label)
            if "status" in wanted:
                result.check(f"outcome {label}", status == wanted["status"], f"status {status}")
            if "reason" in wanted:
                result.check(f"outcome {label} reason", reason == wanted["reason"], f"reason {reason or '-'}")
            if "error" in wanted:
                result.check(f"outcome {label} error", error == wanted["error"], f"error {error or '-'}")

        for tenant_name, count in expect.get("members", {}).items():
            live = len(world.view(world.tenant(tenant_name).tenant_id).members())
            result.check(f"members {tenant_name}", live == count, f"{live} live, expected {count}")

        for name, role in expect.get("roles", {}).items():
            got = world.node(name).role.value
            result.check(f"role {name}", got == role, f"{got}")

        for name, revoked in expect.get("revoked", {}).items():
            got = world.node(name).revoked
            result.check(f"revoked {name}", got == revoked, f"{got}")

        _check_counts(result, "rejects", expect.get("rejects", {}),
                      lambda cls: world.trace.count(kind="reject", detail=cls), lambda got, n: got >= n)
        _check_counts(result, "messages", expect.get("messages", {}),
                      lambda label: world.trace.count(kind="send", msg_type=None if label == "total" else label),
                      lambda got, n: got <= n)
        _check_counts(result, "issued", expect.get("issued", {}),
                      lambda issuer: sum(1 for r in world.issued if issuer == "total" or r.issuer == issuer),
                      lambda got, n: got == n)

        adversary = world.adversary
        if "recovered_plaintexts" in expect:
            got = len(adversary.recovered_foreign) if adversary else 0
            result.check("recovered plaintexts", got == expect["recovered_plaintexts"], f"{got}")
        violations = len(adversary.violations) if adversary else 0
        wanted = expect.get("model_violations", 0)
        result.check("model violations", violations == wanted, f"{violations}")

        if "isolation" in expect:
            report = check_isolation(world)
            result.check("isolation", report.ok == expect["isolation"],
                         f"{len(report.attempts)} attempts, {len(report.violations)} violation(s)")
        if "privacy" in expect:
            leaks = wire_scan(world) + storage_exposure(world)
            result.check("privacy", (not leaks) == expect["privacy"], "; ".join(leaks[:3]) or "no leaks")

        for i, entry in enumerate(expect.get("containment", [])):
            with located(f"expect.containment[{i}]"):
                _containment(world, entry, result)
        for i, entry in enumerate(expect.get("locality", [])):
            with located(f"expect.locality[{i}]"):
                _locality(world, entry, result)

    result.check("invariants", not world.invariant_failures, "; ".join(world.invariant_failures[:3]))


def _containment(world: World, entry: dict, result: ScenarioResult) -> None:
    victim = entry["victim"]
    if entry.get("revoke_by"):
        lifecycle.revoke_member(world, world.node(entry["revoke_by"]), world.node(victim),
                                RevocationReason.COMPROMISE)
        world.run()
    report = compromise_containment_check(world, victim)
    label = f"containment {victim}" + (" after revocation" if entry.get("revoke_by") else "")
    result.check(label, report.ok == entry.get("ok", True),
                 f"accepted by {', '.join(report.accepted_by) or '-'}; outside {', '.join(report.outside) or '-'}")
    if "accepted" in entry:
        result.check(f"{label} acceptors", len(report.accepted_by) == entry["accepted"], f"{len(report.accepted_by)}")
    if "accepted_live" in entry:
        result.check(f"{label} live acceptors", len(report.accepted_live) == entry["accepted_live"],
                     f"{len(report.accepted_live)}")


def _locality(world: World, entry: dict, result: ScenarioResult) -> None:
    if entry["operation"] == "revoke":
        report = revocation_locality(world, entry["manager"], entry["subject"],
                                     RevocationReason(entry.get("reason", "termination")))
    else:
        report = rotation_locality(world, entry["manager"])
    result.check(f"locality {report.operation}", report.ok == entry.get("ok", True), report.render())


# Running

def _compare_golden(result: ScenarioResult, flags: RunFlags) -> None:
    key = get_golden_key(result.path, flags.provider)
    if flags.bless:
        if result.failures:
            result.check("golden", False, f"{key} not blessed: the run failed")
        else:
            result.check("golden", save_golden(key, result.trace, flags.golden_dir), f"{key} blessed")
        return
    golden = get_golden(key, flags.golden_dir)
    if golden is None:
        result.checks.append(("golden", True, f"{key} not blessed yet"))
        return
    result.diff = diff_traces(golden, result.trace, f"{key}.trace")
    result.check("golden", not result.diff,
                 f"{len(result.diff)} diff line(s)" if result.diff else "identical")


def trace_path_for(result: ScenarioResult, flags: RunFlags) -> str:
    if flags.trace_path:
        return flags.trace_path
    return os.path.join(flags.runs_dir, f"{get_golden_key(result.path, flags.provider)}.trace")


def write_outputs(result: ScenarioResult, flags: RunFlags) -> Optional[str]:
    """Write the trace, the report next to it and, if asked, the snapshot."""
    path = trace_path_for(result, flags)
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(result.trace)
        with open(os.path.splitext(path)[0] + ".report", 'w', encoding='utf-8', newline='\n') as f:
            f.write(result.report() + "\n")
        if flags.snapshot_path and result.snapshot is not None:
            os.makedirs(os.path.dirname(flags.snapshot_path) or ".", exist_ok=True)
            with open(flags.snapshot_path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(result.snapshot, f, indent=2, sort_keys=True)
        return path
    except OSError as e:
        logging.error(f"Failed to write outputs for {result.path}: {e}")
        return None


def run_scenario(path: str, flags: Optional[RunFlags] = None) -> tuple:
    """
    Run one scenario to quiescence and check it.

    Args:
        path (str): scenario file
        flags (RunFlags, optional): command-line overrides

    Returns:
        tuple: (exit code, ScenarioResult)
    """
    flags = flags or RunFlags()
    result = ScenarioResult(path=path, provider=flags.provider)
    try:
        doc = load_scenario(path)
        result.name = doc.get("name") or os.path.splitext(os.path.basename(path))[0]
        world = build_world(doc, flags)
        script = Script(world)
        script.schedule(doc.get("script", []))
        schedule_adversary(world, doc.get("adversary", {}))
    except PvtnError as e:
        logging.error(f"Scenario {path} is invalid: {type(e).__name__}: {e}")
        result.failures.append(f"{type(e).__name__}: {e}")
        result.exit_code = EXIT_INVALID
        return result.exit_code, result

    result.world = world
    result.seed = world.seed
    try:
        world.run()
        evaluate(world, script, doc.get("expect", {}), result)
    except ScenarioError as e:
        logging.error(f"Scenario {path} has a bad expectation: {e}")
        result.failures.append(f"ScenarioError: {e}")
        result.exit_code = EXIT_INVALID
        return result.exit_code, result
    except NonTermination as e:
        result.check("termination", False, str(e))
    except InvariantViolation as e:
        result.check("invariants", False, str(e))

    result.trace = world.trace.render()
    result.ticks = world.now
    result.snapshot = world.snapshot()
    _compare_golden(result, flags)
    result.exit_code = EXIT_FAILED if result.failures else EXIT_OK
    if flags.write_files:
        write_outputs(result, flags)

    if result.passed:
        logging.info(f"Scenario {result.name} passed ({len(result.checks)} checks, {result.ticks} ticks)")
    else:
        logging.error(f"Scenario {result.name} failed: {'; '.join(result.failures)}")
    return result.exit_code, result
