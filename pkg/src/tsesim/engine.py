"""Deterministic discrete-time engine over the flow cache.

Each tick: classify the attacker packets due (priced against the cache state
at tick start, so packets racing an in-flight install miss too), probe the
victim's per-packet cost, split the processing budget attacker-first, credit
the victim's served packets back to its subtable, then expire idle entries;
subtables re-rank at every whole second.  Output is a per-second series, the
decay/resurgence metrics, and per-second cache-map frames over 1000-mask
creation batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .attack import AttackSchedule, Trace, schedule_emissions, simple_acl, use_case_acl, UseCase
from .flow_cache import CostModel, FlowCache
from .headers import (
    FIVE_TUPLE,
    HeaderLayout,
    HeaderMask,
    HeaderValue,
    header,
    ip_to_int,
)
from .slowpath import Acl, Action, rule, validate_acl

# One core's processing budget in cost units per second.  Calibrated so that a
# single saturated core ends the constant-rate reference attack at roughly one
# fifth of the victim's baseline, with collapse below 1% six seconds in while
# masks are still spawning.  Lives in config so experiments can rescale it.
DEFAULT_BUDGET_PER_CORE = 7.45e6

DEFAULT_VICTIM_OFFERED = 1.0e6

VICTIM_IP_A = "192.0.2.1"
VICTIM_IP_B = "198.51.100.7"
VICTIM_PROTO = 17  # victim runs over UDP; probe fill uses TCP
VICTIM_PORT_A = 40001
VICTIM_PORT_B = 5201


@dataclass(frozen=True)
class SimConfig:
    cores: int = 1
    budget_per_core: float = DEFAULT_BUDGET_PER_CORE
    victim_offered: float = DEFAULT_VICTIM_OFFERED
    victim_flow_count: int = 2
    emc_enabled: bool = False
    tick: float = 0.1
    duration: float = 60.0
    seed: int = 42
    eps_down: float = 0.01
    eps_up: float = 0.05
    victim_floor: float = 1e-3
    costs: CostModel = CostModel()
    idle_timeout: float = 10.0
    build_cache_map: bool = True

    def validate(self) -> None:
        if self.cores < 1:
            raise ValueError("cores must be >= 1")
        if self.tick <= 0 or self.duration < 0:
            raise ValueError("tick must be positive and duration non-negative")
        per_second = 1.0 / self.tick
        if abs(per_second - round(per_second)) > 1e-9:
            raise ValueError("tick must divide 1.0 exactly")
        if not 0 < self.victim_floor < 1:
            raise ValueError("victim_floor must be in (0, 1)")


@dataclass(frozen=True)
class SecondRecord:
    second: int
    goodput_fraction: float
    victim_cost: float
    attacker_pps: int
    subtables: int
    entries: int


@dataclass(frozen=True)
class Metrics:
    ttd: Optional[float]
    ttr: Optional[float]
    dosp: Optional[float]
    plateau_fraction: Optional[float]


@dataclass(frozen=True)
class CacheMapFrame:
    second: int
    states: tuple[str, ...]  # per batch: A absent, G generating, B active, R expiring, Y never
    attack_state: str  # 1-based packet-batch index, or X while not sending


@dataclass
class TickAudit:
    budget: float
    attacker_demand: float
    attacker_consumed: float
    victim_consumed: float
    fraction: float
    victim_cost: float


@dataclass
class RunResult:
    config: SimConfig
    series: list[SecondRecord]
    metrics: Metrics
    frames: list[CacheMapFrame]
    cache: FlowCache
    victim_headers: list[HeaderValue]
    attack_start: float
    masks_total: int
    audits: list[TickAudit] = field(default_factory=list)

    @property
    def fractions(self) -> list[float]:
        return [r.goodput_fraction for r in self.series]


# --- goodput model -----------------------------------------------------------


def compute_goodput_fraction(
    budget_units: float,
    attacker_demand_units: float,
    victim_demand_units: float,
    floor: float = 1e-3,
) -> float:
    """Attacker demand is served first; the victim gets the leftover.

    The victim never drops below the guaranteed floor fraction, so its
    subtable keeps accruing ranking credit even under full saturation.
    """
    if victim_demand_units <= 0:
        return 1.0
    fraction = (budget_units - attacker_demand_units) / victim_demand_units
    return min(1.0, max(floor, fraction))


def victim_cost_probe(cache: FlowCache, victim_headers: Sequence[HeaderValue]) -> float:
    """Mean cost of classifying one representative packet per victim flow.

    Read-only: neither hit counters nor idle clocks move.
    """
    if not victim_headers:
        return 0.0
    return sum(cache.probe_cost(h) for h in victim_headers) / len(victim_headers)


# --- metrics -------------------------------------------------------------------

# A recovery counts as sustained when the condition holds from some second t
# through at least t+2, i.e. spans two full seconds of samples.
SUSTAIN_SPAN_S = 2


def metrics_extract(
    fractions: Sequence[float],
    attack_start: float,
    eps_down: float = 0.01,
    eps_up: float = 0.05,
) -> Metrics:
    start_s = int(math.ceil(attack_start))
    ttd_second = None
    for s in range(start_s, len(fractions)):
        if fractions[s] <= eps_down:
            ttd_second = s
            break
    if ttd_second is None:
        return Metrics(None, None, None, None)
    ttd = float(ttd_second - attack_start)
    run_start = None
    ttr = None
    plateau = None
    for s in range(ttd_second + 1, len(fractions) + 1):
        if s < len(fractions) and fractions[s] >= eps_up:
            if run_start is None:
                run_start = s
            continue
        if run_start is not None:
            span = (s - 1) - run_start
            if span >= SUSTAIN_SPAN_S:
                ttr = float(run_start - attack_start)
                plateau = sum(fractions[run_start:s]) / (s - run_start)
                break
        run_start = None
    dosp = ttr - ttd if ttr is not None else None
    return Metrics(ttd, ttr, dosp, plateau)


# --- scenario construction -----------------------------------------------------


def victim_flow_headers(layout: HeaderLayout = FIVE_TUPLE, count: int = 2) -> list[HeaderValue]:
    """Victim traffic, one header per flow; consecutive pairs are the two directions."""
    a, b = ip_to_int(VICTIM_IP_A), ip_to_int(VICTIM_IP_B)
    flows = []
    for i in range(count):
        pair = i // 2
        sport, dport = VICTIM_PORT_A + pair, VICTIM_PORT_B + pair
        if i % 2 == 0:
            flows.append(
                header(layout, ip_src=a, ip_dst=b, proto=VICTIM_PROTO, sport=sport, dport=dport)
            )
        else:
            flows.append(
                header(layout, ip_src=b, ip_dst=a, proto=VICTIM_PROTO, sport=dport, dport=sport)
            )
    return flows


def victim_allow_rules(flows: Sequence[HeaderValue], base_priority: int = 1000) -> list:
    """Exact allow rules for the victim flows, keyed on destination and ports.

    The source address stays wildcarded: every probe packet then charges the
    same constant mask bits against these rules regardless of which field it
    targets, so the attack's distinct-mask accounting is unchanged by the
    victim's presence.
    """
    rules = []
    for i, h in enumerate(flows):
        rules.append(
            rule(
                h.layout,
                base_priority - i,
                Action.ALLOW,
                ip_dst=h.get("ip_dst"),
                proto=h.get("proto"),
                sport=h.get("sport"),
                dport=h.get("dport"),
            )
        )
    return rules


def scenario_acl(
    use_case: Optional[UseCase] = None,
    layout: HeaderLayout = FIVE_TUPLE,
    victim_flows: Sequence[HeaderValue] = (),
) -> Acl:
    """Victim allow rules above the attack-target rules above the catch-all."""
    base = use_case_acl(use_case, layout) if use_case is not None else simple_acl(layout)
    rules = victim_allow_rules(victim_flows) + list(base.rules)
    acl = Acl.from_rules(layout, rules)
    problems = validate_acl(acl)
    if problems:
        raise ValueError(f"scenario ACL invalid: {problems}")
    return acl


# --- cache-map batches -----------------------------------------------------------

BATCH_MASKS = 1000


class MaskBatches:
    """Distinct masks in first-spawn order, chunked into 1000-mask batches."""

    def __init__(self, trace: Trace, acl: Acl, cache: Optional[FlowCache] = None):
        if cache is None:
            cache = FlowCache(acl, emc_enabled=False)  # synthesis memo holder only
        batch_of: dict[HeaderMask, int] = {}
        first_pos: list[int] = []
        for pos, p in enumerate(trace.packets):
            m = cache.synthesize(p).mask
            if m not in batch_of:
                batch_of[m] = len(first_pos) // BATCH_MASKS
                first_pos.append(pos)
        self.batch_of = batch_of
        self.mask_count = len(first_pos)
        self.count = (self.mask_count + BATCH_MASKS - 1) // BATCH_MASKS
        self.sizes = [
            min(BATCH_MASKS, self.mask_count - b * BATCH_MASKS) for b in range(self.count)
        ]
        self._first_pos = first_pos

    def never_created(self, covered_prefix: int) -> set[int]:
        """Batches whose masks can never spawn given the trace-position coverage."""
        return {
            b
            for b in range(self.count)
            if self._first_pos[b * BATCH_MASKS] >= covered_prefix
        }


def emission_count(schedule: AttackSchedule, horizon: float) -> int:
    """Closed-form number of emissions strictly before the horizon."""
    if schedule.rate <= 0 or horizon <= schedule.start:
        return 0
    window = horizon - schedule.start
    if schedule.t_attack is None:
        return math.ceil(window * schedule.rate - 1e-9)
    per_phase = int(round(schedule.t_attack * schedule.rate))
    cycle = schedule.t_attack + schedule.t_sleep
    full = int(window // cycle)
    rem = window - full * cycle
    return full * per_phase + min(per_phase, math.ceil(rem * schedule.rate - 1e-9))


def covered_positions(schedule: AttackSchedule, trace_len: int, horizon: float) -> int:
    """Distinct trace positions the schedule reaches before the horizon."""
    count = emission_count(schedule, horizon)
    if count == 0:
        return 0
    return min(trace_len, (count - 1) // schedule.clone + 1)


# --- the run loop ------------------------------------------------------------------


class _Emitter:
    """Buffered pull over one schedule's emission stream."""

    def __init__(self, trace: Trace, schedule: AttackSchedule, horizon: float):
        self.schedule = schedule
        self.trace = trace
        self._it = schedule_emissions(trace, schedule, horizon)
        self._next = next(self._it, None)
        self.last_pos: Optional[int] = None

    def due(self, until: float) -> list[HeaderValue]:
        out = []
        while self._next is not None and self._next[0] < until:
            _, pos, h = self._next
            out.append(h)
            self.last_pos = pos
            self._next = next(self._it, None)
        return out


def run(
    config: SimConfig,
    acl: Acl,
    attacks: Sequence[tuple[Trace, AttackSchedule]],
    victim_headers: Optional[Sequence[HeaderValue]] = None,
) -> RunResult:
    """Drive attacker and victim through one shared classifier.

    Multi-core scaling is modeled as one classifier with `cores` times the
    budget; per-core sharding is out of scope.  A run is single-threaded and
    fully deterministic; parameter sweeps are independent runs.
    """
    config.validate()
    problems = validate_acl(acl)
    if problems:
        raise ValueError(f"ACL invalid: {problems}")
    if victim_headers is None:
        victim_headers = victim_flow_headers(acl.layout, config.victim_flow_count)
    victims = list(victim_headers)

    cache = FlowCache(
        acl,
        emc_enabled=config.emc_enabled,
        costs=config.costs,
        idle_timeout=config.idle_timeout,
    )
    for h in victims:
        cache.classify(h, now=0.0)

    batches: Optional[MaskBatches] = None
    never: set[int] = set()
    batch_present: list[int] = []
    masks_total = 0
    if attacks:
        trace0, sched0 = attacks[0]
        if config.build_cache_map:
            batches = MaskBatches(trace0, acl, cache)
            masks_total = batches.mask_count
            covered = covered_positions(sched0, len(trace0), config.duration)
            never = batches.never_created(covered)
            batch_present = [0] * batches.count
        else:
            masks_total = len({cache.synthesize(p).mask for p in trace0.packets})

    emitters = [_Emitter(trace, sched, config.duration) for trace, sched in attacks]
    attack_start = min((sched.start for _, sched in attacks), default=0.0)

    ticks_per_second = round(1.0 / config.tick)
    total_ticks = int(round(config.duration / config.tick))
    budget_tick = config.cores * config.budget_per_core * config.tick

    series: list[SecondRecord] = []
    frames: list[CacheMapFrame] = []
    audits: list[TickAudit] = []

    frac_acc = 0.0
    cost_acc = 0.0
    pps_acc = 0
    created_this_second: set[int] = set()
    expired_this_second: set[int] = set()

    for step in range(total_ticks):
        t1 = (step + 1) * config.tick
        due: list[HeaderValue] = []
        for em in emitters:
            due.extend(em.due(t1))
        batch = cache.classify_batch(due, now=t1)
        if batches is not None:
            for m in batch.created_masks:
                b = batches.batch_of.get(m)
                if b is not None:
                    created_this_second.add(b)
                    batch_present[b] += 1

        victim_cost = victim_cost_probe(cache, victims)
        victim_demand = config.victim_offered * config.tick * victim_cost
        fraction = compute_goodput_fraction(
            budget_tick, batch.total_cost, victim_demand, config.victim_floor
        )
        processed = fraction * config.victim_offered * config.tick
        share = processed / len(victims) if victims else 0.0
        for h in victims:
            cache.credit_hits(h, int(round(share)), now=t1)

        _, removed_masks = cache.expire(t1)
        if batches is not None:
            for m in removed_masks:
                b = batches.batch_of.get(m)
                if b is not None:
                    expired_this_second.add(b)
                    batch_present[b] -= 1

        if (step + 1) % ticks_per_second == 0:
            cache.rebalance(t1)

        audits.append(
            TickAudit(
                budget=budget_tick,
                attacker_demand=batch.total_cost,
                attacker_consumed=min(batch.total_cost, budget_tick),
                victim_consumed=fraction * victim_demand,
                fraction=fraction,
                victim_cost=victim_cost,
            )
        )
        frac_acc += fraction
        cost_acc += victim_cost
        pps_acc += batch.packets

        if (step + 1) % ticks_per_second == 0:
            second = (step + 1) // ticks_per_second - 1
            series.append(
                SecondRecord(
                    second=second,
                    goodput_fraction=frac_acc / ticks_per_second,
                    victim_cost=cost_acc / ticks_per_second,
                    attacker_pps=pps_acc,
                    subtables=cache.subtable_count,
                    entries=cache.entry_count,
                )
            )
            if batches is not None:
                states = []
                for b in range(batches.count):
                    if b in never:
                        states.append("Y")
                    elif b in created_this_second:
                        states.append("G")
                    elif b in expired_this_second:
                        states.append("R")
                    elif batch_present[b] <= 0:
                        states.append("A")
                    else:
                        states.append("B")
                em = emitters[0] if emitters else None
                if em is not None and pps_acc > 0 and em.last_pos is not None:
                    attack_state = str(em.last_pos // 1000 + 1)
                else:
                    attack_state = "X"
                frames.append(CacheMapFrame(second, tuple(states), attack_state))
            frac_acc = cost_acc = 0.0
            pps_acc = 0
            created_this_second = set()
            expired_this_second = set()

    metrics = metrics_extract(
        [r.goodput_fraction for r in series], attack_start, config.eps_down, config.eps_up
    )
    return RunResult(
        config=config,
        series=series,
        metrics=metrics,
        frames=frames,
        cache=cache,
        victim_headers=victims,
        attack_start=attack_start,
        masks_total=masks_total,
        audits=audits,
    )


# --- exports -----------------------------------------------------------------------

SERIES_CSV_HEADER = "time_s,goodput_fraction,victim_cost,attacker_pps,subtables,entries"


def series_to_csv(series: Iterable[SecondRecord]) -> str:
    lines = [SERIES_CSV_HEADER]
    for r in series:
        lines.append(
            f"{r.second},{r.goodput_fraction:.6f},{r.victim_cost:.3f},"
            f"{r.attacker_pps},{r.subtables},{r.entries}"
        )
    return "\n".join(lines) + "\n"


def metrics_to_lines(metrics: Metrics) -> str:
    def fmt(v: Optional[float]) -> str:
        return "absent" if v is None else f"{v:.3f}"

    return (
        f"ttd={fmt(metrics.ttd)}\n"
        f"ttr={fmt(metrics.ttr)}\n"
        f"dosp={fmt(metrics.dosp)}\n"
        f"plateau_fraction={fmt(metrics.plateau_fraction)}\n"
    )


def cachemap_to_csv(frames: Sequence[CacheMapFrame]) -> str:
    if not frames:
        return "second,attack\n"
    nbatches = len(frames[0].states)
    header_cols = ["second", "attack"] + [f"b{i + 1}" for i in range(nbatches)]
    lines = [",".join(header_cols)]
    for f in frames:
        lines.append(",".join([str(f.second), f.attack_state, *f.states]))
    return "\n".join(lines) + "\n"
