"""
Helper Functions Module for PVTN

Small formatting helpers shared by the command handlers: separators,
pass/fail marks, timestamps, and the rendering of run reports and tree
dumps.
"""

from datetime import datetime


def separator(text: str = "") -> str:
    """
    Return a separator line, optionally with text in the middle.

    Examples:
        >>> separator()
        '────────────'
        >>> separator("acme")
        '────── acme ──────'
    """
    return f"────── {text} ──────" if text else "────────────"


def status_mark(ok: bool) -> str:
    return "✅" if ok else "❌"


def format_datetime(iso_date: str) -> str:
    """
    Format ISO datetime to a more readable format.

    Args:
        iso_date (str): Date in ISO format (e.g. "2026-05-19T15:30:45.123456")

    Returns:
        str: Formatted date (e.g. "19.05.2026 15:30")
    """
    dt = datetime.fromisoformat(iso_date)
    return dt.strftime("%d.%m.%Y %H:%M")


def pluralize(count: int, word: str) -> str:
    """'1 run', '2 runs'"""
    return f"{count} {word}" if count == 1 else f"{count} {word}s"


def short_hex(value, size: int = 12) -> str:
    if isinstance(value, bytes):
        value = value.hex()
    return str(value)[:size] if value else "-"


def format_tree(tenant: dict) -> str:
    """
    Render one tenant of a world snapshot as an indented tree.

    Args:
        tenant (dict): a tenant entry of World.snapshot()

    Returns:
        str: one line per member, children indented under their parent
    """
    by_digest = {n["digest"]: n for n in tenant["nodes"]}
    children: dict = {}
    roots = []
    for node in tenant["nodes"]:
        if node["parent"] and node["parent"] in by_digest:
            children.setdefault(node["parent"], []).append(node)
        else:
            roots.append(node)

    lines = [separator(f"{tenant['name']} ({tenant['mode']})")]

    def walk(node: dict, depth: int) -> None:
        flag = " [revoked]" if node["revoked"] else ""
        lines.append(f"{'  ' * depth}{node['name']} {node['role']} {short_hex(node['digest'])}{flag}")
        for child in sorted(children.get(node["digest"], []), key=lambda n: n["name"]):
            walk(child, depth + 1)

    for root in sorted(roots, key=lambda n: n["name"]):
        walk(root, 0)
    if tenant.get("gateway"):
        lines.append(f"gateway: {tenant['gateway']}")
    return "\n".join(lines)


def format_report(name: str, checks: list, failures: list) -> str:
    """
    Render the result of one scenario run.

    Args:
        name (str): scenario name
        checks (list): (label, ok, detail) tuples, in evaluation order
        failures (list): failure messages; empty when the run passed
    """
    lines = [separator(name)]
    for label, ok, detail in checks:
        lines.append(f"{status_mark(ok)} {label}" + (f": {detail}" if detail else ""))
    lines.append(separator())
    lines.append("PASS" if not failures else f"FAIL ({pluralize(len(failures), 'problem')})")
    lines.extend(f"  - {failure}" for failure in failures)
    return "\n".join(lines)
