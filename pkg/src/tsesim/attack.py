"""Probe-trace construction and scheduled packet emission.

A probe trace walks every (key, mask) region a whitelist-plus-default-deny
table can cache: for each targeted field it sends the allowed value plus one
value per bit position that differs first at exactly that bit, and takes the
cross product over the targeted fields.  Schedules replay a trace at a fixed
rate, optionally duty-cycled (attack/sleep) and with per-packet cloning that
holds the distinct-packet rate at 1000/s while the packet rate grows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from .headers import (
    FIVE_TUPLE,
    HeaderLayout,
    HeaderValue,
    header,
    int_to_ip,
    ip_to_int,
    IP_FIELDS,
)
from .slowpath import Acl, Action, rule

# An attack stays "low rate" while it never exceeds this packet rate.
LOW_RATE_PPS = 15_000

# 64-byte frames plus preamble and inter-frame gap on the wire.
DEFAULT_WIRE_BYTES = 84


class UseCase(enum.Enum):
    DP = "dp"
    SP_DP = "sp_dp"
    SIP_SP_DP = "sip_sp_dp"

    @property
    def targeted_fields(self) -> tuple[str, ...]:
        return {
            UseCase.DP: ("dport",),
            UseCase.SP_DP: ("sport", "dport"),
            UseCase.SIP_SP_DP: ("ip_src", "sport", "dport"),
        }[self]


@dataclass(frozen=True)
class Trace:
    """Ordered probe packets plus their on-wire size."""

    packets: tuple[HeaderValue, ...]
    wire_bytes: int = DEFAULT_WIRE_BYTES

    def __len__(self) -> int:
        return len(self.packets)


@dataclass(frozen=True)
class AttackSchedule:
    """Replay plan: rate, optional attack/sleep duty cycle, clone factor."""

    rate: float
    t_attack: Optional[float] = None  # None = continuous
    t_sleep: float = 0.0
    clone: int = 1
    start: float = 0.0

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if self.t_sleep < 0:
            raise ValueError("t_sleep must be >= 0")
        if self.t_attack is not None and self.t_attack <= 0:
            raise ValueError("t_attack must be positive when given")
        if self.clone < 1:
            raise ValueError("clone factor must be >= 1")

    @property
    def is_low_rate(self) -> bool:
        return self.rate <= LOW_RATE_PPS

    @property
    def mask_generation_rate(self) -> float:
        """Distinct packets per second of attack phase."""
        return self.rate / self.clone

    def phase_at(self, t: float) -> str:
        """'idle' before start, else 'attack' or 'sleep' within the duty cycle."""
        if self.rate == 0 or t < self.start:
            return "idle"
        if self.t_attack is None:
            return "attack"
        offset = (t - self.start) % (self.t_attack + self.t_sleep)
        return "attack" if offset < self.t_attack else "sleep"


def field_probe_values(width: int, allow_value: int) -> list[int]:
    """The allowed value, then one probe per bit (MSB first).

    Probe i keeps bits above i, flips bit i, and copies the remaining bits
    from the allowed value, so its first differing bit against the allowed
    value is exactly i.  Length is width + 1.
    """
    if not 0 <= allow_value < (1 << width):
        raise ValueError(f"allow_value {allow_value} exceeds {width} bits")
    return [allow_value] + [allow_value ^ (1 << (width - 1 - i)) for i in range(width)]


def default_benign_fill(layout: HeaderLayout = FIVE_TUPLE) -> HeaderValue:
    """Filler for untargeted fields; matches no allow rule of the standard table."""
    return header(
        layout,
        ip_src=ip_to_int("192.0.2.1"),
        ip_dst=ip_to_int("198.51.100.7"),
        proto=6,
        sport=55555,
        dport=55555,
    )


def _single_field_allow(acl: Acl, field_name: str) -> int:
    for r in acl.rules:
        if r.action is Action.ALLOW and len(r.matches) == 1 and r.matches[0][0] == field_name:
            return r.matches[0][1]
    raise ValueError(f"ACL has no single-field allow rule on {field_name!r}")


def build_trace(
    use_case: UseCase,
    acl: Acl,
    benign_fill: Optional[HeaderValue] = None,
    wire_bytes: int = DEFAULT_WIRE_BYTES,
) -> Trace:
    """Cross product of per-field probes; the last targeted field cycles fastest."""
    layout = acl.layout
    fill = benign_fill if benign_fill is not None else default_benign_fill(layout)
    fields = use_case.targeted_fields
    probe_lists = [
        field_probe_values(layout.spec(f).width, _single_field_allow(acl, f)) for f in fields
    ]
    packets: list[HeaderValue] = []
    base = dict(fill.items())

    def emit(i: int, partial: dict) -> None:
        if i == len(fields):
            packets.append(header(layout, **{**base, **partial}))
            return
        for v in probe_lists[i]:
            partial[fields[i]] = v
            emit(i + 1, partial)

    emit(0, {})
    return Trace(tuple(packets), wire_bytes)


def clone_factor(rate_pps: float) -> int:
    """Clones per distinct packet needed to keep the distinct rate at 1000/s."""
    if rate_pps < 1:
        raise ValueError("rate must be >= 1 pps")
    return math.ceil(rate_pps / 1000)


def schedule_emissions(
    trace: Trace, schedule: AttackSchedule, horizon_seconds: float
) -> Iterator[tuple[float, int, HeaderValue]]:
    """Yield (timestamp, trace_index, header) for every emission before the horizon.

    Packets are spaced 1/rate apart during attack phases; each trace packet
    repeats `clone` times back to back; the trace position carries across
    sleep phases and wraps cyclically.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    rate = schedule.rate
    if rate <= 0:
        return
    n = schedule.clone
    length = len(trace)
    if schedule.t_attack is None:
        per_phase = None
        cycle = None
    else:
        per_phase = int(round(schedule.t_attack * rate))
        if per_phase < 1:
            raise ValueError("attack phase shorter than one packet interval")
        cycle = schedule.t_attack + schedule.t_sleep
    k = 0
    while True:
        if per_phase is None:
            t = schedule.start + k / rate
        else:
            phase, idx = divmod(k, per_phase)
            t = schedule.start + phase * cycle + idx / rate
        if t >= horizon_seconds:
            return
        pos = (k // n) % length
        yield t, pos, trace.packets[pos]
        k += 1


def average_rate(schedule: AttackSchedule, trace: Trace) -> tuple[float, float]:
    """Duty-cycle-averaged (packets/second, bits/second on the wire)."""
    if schedule.rate == 0:
        return 0.0, 0.0
    if schedule.t_attack is None:
        pps = schedule.rate
    else:
        pps = schedule.rate * schedule.t_attack / (schedule.t_attack + schedule.t_sleep)
    return pps, pps * trace.wire_bytes * 8


# --- the standard whitelist-plus-default-deny table -------------------------

ALLOW_DPORT = 80
ALLOW_IP_SRC = "10.0.0.1"
ALLOW_SPORT = 12345


def simple_acl(layout: HeaderLayout = FIVE_TUPLE) -> Acl:
    """Reference four-rule table: three single-field allows over a deny-all."""
    return Acl.from_rules(
        layout,
        [
            rule(layout, 100, Action.ALLOW, dport=ALLOW_DPORT),
            rule(layout, 99, Action.ALLOW, ip_src=ip_to_int(ALLOW_IP_SRC)),
            rule(layout, 98, Action.ALLOW, sport=ALLOW_SPORT),
            rule(layout, 0, Action.DENY),
        ],
    )


def use_case_acl(use_case: UseCase, layout: HeaderLayout = FIVE_TUPLE) -> Acl:
    """The subset of the standard table a use case probes, plus the catch-all."""
    keep = {
        UseCase.DP: {"dport"},
        UseCase.SP_DP: {"dport", "sport"},
        UseCase.SIP_SP_DP: {"dport", "sport", "ip_src"},
    }[use_case]
    rules = [
        r
        for r in simple_acl(layout).rules
        if r.is_catch_all or (len(r.matches) == 1 and r.matches[0][0] in keep)
    ]
    return Acl.from_rules(layout, rules)


# --- trace files -------------------------------------------------------------
#
# One packet per line:
#   t=<seconds> ip_src=<dotted> ip_dst=<dotted> proto=<int> sport=<int> dport=<int>


def format_trace_text(trace: Trace, rate: float = 1000.0) -> str:
    lines = []
    for i, p in enumerate(trace.packets):
        parts = [f"t={i / rate:.6f}"]
        for name, value in p.items():
            parts.append(f"{name}={int_to_ip(value) if name in IP_FIELDS else value}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_trace_text(text: str, layout: HeaderLayout = FIVE_TUPLE) -> Trace:
    packets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields: dict[str, int] = {}
        for token in line.split():
            key, sep, raw = token.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: bad token {token!r}")
            if key == "t":
                float(raw)  # validated, not stored; timing comes from schedules
            elif key in IP_FIELDS:
                fields[key] = ip_to_int(raw)
            else:
                fields[key] = int(raw)
        packets.append(header(layout, **fields))
    return Trace(tuple(packets))


def save_trace(path: str | Path, trace: Trace, rate: float = 1000.0) -> None:
    Path(path).write_text(format_trace_text(trace, rate))


def load_trace(path: str | Path, layout: HeaderLayout = FIVE_TUPLE) -> Trace:
    return parse_trace_text(Path(path).read_text(), layout)
