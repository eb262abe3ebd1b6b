"""Order-dependent priority flow table and megaflow mask synthesis.

The flow table ("slow path") is a list of rules with unique priorities; each
rule constrains some fields to exact values and wildcards the rest.  A lookup
returns the highest-priority matching rule.  Synthesis turns one lookup into
a cached (key, mask, action) entry that covers the triggering header, stays
disjoint from every other entry the same table can produce, and wildcards as
many bits as the rule set allows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .headers import (
    HeaderLayout,
    HeaderMask,
    HeaderValue,
    MaskedKey,
    apply_mask,
    first_diff_bit,
    int_to_ip,
    ip_to_int,
    prefix_mask,
    IP_FIELDS,
)


class Action(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


@dataclass(frozen=True)
class FlowRule:
    """One rule: exact constraints on some fields, wildcard on the rest."""

    priority: int
    matches: tuple[tuple[str, int], ...]  # (field, exact value), layout order
    action: Action

    def constraint(self, name: str) -> Optional[int]:
        for f, v in self.matches:
            if f == name:
                return v
        return None

    @property
    def is_catch_all(self) -> bool:
        return not self.matches


def rule(layout: HeaderLayout, priority: int, action: Action, **matches: int) -> FlowRule:
    """Build a rule, ordering its constraints by the layout's field order."""
    for name in matches:
        layout.index(name)  # raises KeyError on unknown fields
    ordered = tuple((n, matches[n]) for n in layout.names if n in matches)
    return FlowRule(priority, ordered, action)


@dataclass(frozen=True)
class Acl:
    """Rules in descending priority; the last rule must be a catch-all deny."""

    layout: HeaderLayout
    rules: tuple[FlowRule, ...]

    @staticmethod
    def from_rules(layout: HeaderLayout, rules: Iterable[FlowRule]) -> "Acl":
        ordered = tuple(sorted(rules, key=lambda r: -r.priority))
        return Acl(layout, ordered)


def validate_acl(acl: Acl) -> list[str]:
    """Return a list of violations; empty means the ACL is usable."""
    problems: list[str] = []
    if not acl.rules:
        return ["empty ACL"]
    priorities = [r.priority for r in acl.rules]
    if len(set(priorities)) != len(priorities):
        problems.append("duplicate priorities")
    if any(a.priority < b.priority for a, b in zip(acl.rules, acl.rules[1:])):
        problems.append("rules not in descending priority order")
    last = acl.rules[-1]
    if not (last.is_catch_all and last.action is Action.DENY):
        problems.append("no catch-all deny rule at lowest priority")
    for r in acl.rules:
        for name, value in r.matches:
            try:
                spec = acl.layout.spec(name)
            except KeyError:
                problems.append(f"rule priority={r.priority}: unknown field {name!r}")
                continue
            if not 0 <= value <= spec.full_mask:
                problems.append(
                    f"rule priority={r.priority}: value {value} exceeds field width of {name}"
                )
    return problems


def slowpath_lookup(h: HeaderValue, acl: Acl) -> FlowRule:
    """First rule, in descending priority, whose exact constraints all match."""
    for r in acl.rules:
        if all(h.get(name) == value for name, value in r.matches):
            return r
    raise RuntimeError("ACL has no catch-all; validate_acl should have caught this")


@dataclass
class SynthesizedFlow:
    key: MaskedKey
    mask: HeaderMask
    action: Action


def synthesize_megaflow(h: HeaderValue, acl: Acl) -> SynthesizedFlow:
    """Derive the (key, mask, action) cache entry for a header.

    Walk rules in descending priority.  For the current rule, examine its
    constrained fields in layout order: an exact match un-wildcards the whole
    field and moves on to the rule's next field; a mismatch un-wildcards the
    prefix up to and including the first differing bit and abandons the rule.
    The first rule whose constrained fields all match ends the walk; the
    catch-all ends it with a deny.  Only examined bits ever enter the mask,
    so the entry is as broad as the rule set permits.
    """
    layout = h.layout
    acc = [0] * len(layout.fields)
    for r in acl.rules:
        matched = True
        for name, value in r.matches:
            i = layout.index(name)
            width = layout.fields[i].width
            hv = h.values[i]
            if hv == value:
                acc[i] = layout.fields[i].full_mask
            else:
                diff = first_diff_bit(hv, value, width)
                assert diff is not None
                acc[i] |= prefix_mask(width, diff + 1)
                matched = False
                break
        if matched:
            m = HeaderMask(layout, tuple(acc))
            return SynthesizedFlow(apply_mask(h, m), m, r.action)
    raise RuntimeError("ACL has no catch-all; validate_acl should have caught this")


# --- line-oriented text format -------------------------------------------
#
# One rule per line: "priority=<int> [field=<value>]* action=<allow|deny>".
# Absent fields are wildcards; ip fields use dotted-quad values.


def _parse_value(layout: HeaderLayout, name: str, raw: str) -> int:
    if name in IP_FIELDS and "." in raw:
        return ip_to_int(raw)
    return int(raw, 0)


def parse_acl_text(layout: HeaderLayout, text: str) -> Acl:
    rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        priority: Optional[int] = None
        action: Optional[Action] = None
        matches: dict[str, int] = {}
        for token in line.split():
            if "=" not in token:
                raise ValueError(f"line {lineno}: bad token {token!r}")
            key, _, raw = token.partition("=")
            if key == "priority":
                priority = int(raw)
            elif key == "action":
                action = Action(raw)
            else:
                matches[key] = _parse_value(layout, key, raw)
        if priority is None or action is None:
            raise ValueError(f"line {lineno}: rule needs priority= and action=")
        rules.append(rule(layout, priority, action, **matches))
    return Acl.from_rules(layout, rules)


def format_acl_text(acl: Acl) -> str:
    lines = []
    for r in acl.rules:
        parts = [f"priority={r.priority}"]
        for name, value in r.matches:
            if name in IP_FIELDS:
                parts.append(f"{name}={int_to_ip(value)}")
            else:
                parts.append(f"{name}={value}")
        parts.append(f"action={r.action.value}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_acl(path: str | Path, layout: HeaderLayout) -> Acl:
    return parse_acl_text(layout, Path(path).read_text())


def save_acl(path: str | Path, acl: Acl) -> None:
    Path(path).write_text(format_acl_text(acl))
