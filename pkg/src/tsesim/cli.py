"""Command-line front end: trace generation, simulation runs, rendering, sweeps.

Exit codes: 0 success, 1 runtime/I-O failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .attack import (
    AttackSchedule,
    UseCase,
    average_rate,
    build_trace,
    clone_factor,
    load_trace,
    save_trace,
    use_case_acl,
)
from .engine import (
    DEFAULT_BUDGET_PER_CORE,
    DEFAULT_VICTIM_OFFERED,
    SimConfig,
    cachemap_to_csv,
    metrics_to_lines,
    run,
    scenario_acl,
    series_to_csv,
    victim_flow_headers,
)
from .flow_cache import FlowCache
from .headers import FIVE_TUPLE
from .slowpath import load_acl, validate_acl


class ConfigError(Exception):
    pass


@dataclass
class Scenario:
    use_case: str = "sip_sp_dp"
    acl: Optional[str] = None
    trace: Optional[str] = None
    tse: str = "1.0"
    rate: float = 1000.0
    t_attack: float = 10.0
    t_sleep: float = 2.0
    attack_start: float = 20.0
    cores: int = 1
    duration: float = 60.0
    budget_per_core: float = DEFAULT_BUDGET_PER_CORE
    victim_offered: float = DEFAULT_VICTIM_OFFERED
    victim_flows: int = 2
    emc: bool = False
    tick: float = 0.1
    seed: int = 42
    eps_down: float = 0.01
    eps_up: float = 0.05
    out: str = "out"

    def schedule(self) -> AttackSchedule:
        if self.tse == "1.0":
            return AttackSchedule(rate=self.rate, start=self.attack_start)
        clone = clone_factor(self.rate) if self.tse == "2.1" else 1
        return AttackSchedule(
            rate=self.rate,
            t_attack=self.t_attack,
            t_sleep=self.t_sleep,
            clone=clone,
            start=self.attack_start,
        )

    def sim_config(self, build_cache_map: bool = True) -> SimConfig:
        return SimConfig(
            cores=self.cores,
            budget_per_core=self.budget_per_core,
            victim_offered=self.victim_offered,
            victim_flow_count=self.victim_flows,
            emc_enabled=self.emc,
            tick=self.tick,
            duration=self.duration,
            seed=self.seed,
            eps_down=self.eps_down,
            eps_up=self.eps_up,
            build_cache_map=build_cache_map,
        )


_SCENARIO_FIELDS = {f.name: f for f in fields(Scenario)}
_VALID_TSE = ("1.0", "2.0", "2.1")
_VALID_USE_CASES = tuple(u.value for u in UseCase)


def parse_config(config_path: Optional[str], overrides: dict) -> Scenario:
    """File values first, command-line flags on top; unknown keys are rejected."""
    values: dict = {}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key in loaded:
            if key not in _SCENARIO_FIELDS:
                raise ConfigError(f"unknown config key: {key!r}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        scenario = Scenario(**values)
    except TypeError as e:
        raise ConfigError(str(e))
    if scenario.tse not in _VALID_TSE:
        raise ConfigError(f"tse must be one of {_VALID_TSE}")
    if scenario.use_case not in _VALID_USE_CASES:
        raise ConfigError(f"use_case must be one of {_VALID_USE_CASES}")
    if scenario.rate < 0 or scenario.duration <= 0 or scenario.cores < 1:
        raise ConfigError("rate must be >= 0, duration > 0, cores >= 1")
    if scenario.rate > 0 and scenario.attack_start > scenario.duration:
        raise ConfigError("attack_start must not exceed duration")
    if scenario.acl is not None and not Path(scenario.acl).exists():
        raise ConfigError(f"ACL file not found: {scenario.acl}")
    if scenario.trace is not None and not Path(scenario.trace).exists():
        raise ConfigError(f"trace file not found: {scenario.trace}")
    return scenario


def _load_scenario_parts(scenario: Scenario):
    victims = victim_flow_headers(FIVE_TUPLE, scenario.victim_flows)
    use_case = UseCase(scenario.use_case)
    if scenario.acl:
        acl = load_acl(scenario.acl, FIVE_TUPLE)
        problems = validate_acl(acl)
        if problems:
            raise ConfigError(f"ACL invalid: {problems}")
    else:
        acl = scenario_acl(use_case, victim_flows=victims)
    trace = load_trace(scenario.trace) if scenario.trace else build_trace(use_case, acl)
    return acl, trace, victims


def distinct_mask_count(trace, acl) -> int:
    cache = FlowCache(acl, emc_enabled=False)
    return len({cache.synthesize(p).mask for p in trace.packets})


def cmd_gen_trace(scenario: Scenario) -> int:
    use_case = UseCase(scenario.use_case)
    if scenario.acl:
        acl = load_acl(scenario.acl, FIVE_TUPLE)
    else:
        acl = use_case_acl(use_case)
    trace = build_trace(use_case, acl)
    out = Path(scenario.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(out, trace, rate=scenario.rate)
    masks = distinct_mask_count(trace, acl)
    print(f"wrote {out}: {len(trace)} packets, {masks} distinct masks")
    return 0


def cmd_run(scenario: Scenario) -> int:
    acl, trace, victims = _load_scenario_parts(scenario)
    schedule = scenario.schedule()
    result = run(scenario.sim_config(), acl, [(trace, schedule)], victims)
    out_dir = Path(scenario.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "series.csv").write_text(series_to_csv(result.series))
    (out_dir / "metrics.txt").write_text(metrics_to_lines(result.metrics))
    (out_dir / "cachemap.csv").write_text(cachemap_to_csv(result.frames))
    pps, bps = average_rate(schedule, trace)
    print(
        f"run complete: {len(trace)} trace packets, {result.masks_total} distinct masks, "
        f"avg attack rate {pps:.1f} pps ({bps / 1000:.0f} kbps), "
        f"low-rate={'yes' if schedule.is_low_rate else 'no'}"
    )
    print(f"artifacts in {out_dir}/: series.csv metrics.txt cachemap.csv")
    sys.stdout.write(metrics_to_lines(result.metrics))
    return 0


def render_cache_map(csv_text: str) -> str:
    """Fixed-width text grid: batch rows top down, attack-state row, time row."""
    lines = [ln for ln in csv_text.strip().split("\n") if ln]
    if not lines:
        raise ValueError("empty cache map CSV")
    header = lines[0].split(",")
    if header[:2] != ["second", "attack"]:
        raise ValueError("bad cache map CSV header")
    nbatches = len(header) - 2
    seconds: list[str] = []
    attack: list[str] = []
    grid: list[list[str]] = [[] for _ in range(nbatches)]
    for ln in lines[1:]:
        cols = ln.split(",")
        if len(cols) != 2 + nbatches:
            raise ValueError(f"bad cache map CSV row: {ln!r}")
        seconds.append(cols[0])
        attack.append(cols[1])
        for b in range(nbatches):
            grid[b].append(cols[2 + b])
    width = max((len(a) for a in attack), default=1)
    out = []
    for b in range(nbatches):
        label = f"{b + 1}k".rjust(4)
        out.append(label + " " + " ".join(c.rjust(width) for c in grid[b]))
    out.append("   A " + " ".join(a.rjust(width) for a in attack))
    out.append("T[s] " + " ".join(s[-1].rjust(width) for s in seconds))
    if seconds:
        out.append(f"     seconds {seconds[0]}..{seconds[-1]}")
    return "\n".join(out) + "\n"


def cmd_render_map(path: str) -> int:
    text = Path(path).read_text()
    sys.stdout.write(render_cache_map(text))
    return 0


def cmd_sweep(scenario: Scenario, cores_list: list[int], rates_list: list[float]) -> int:
    victims = victim_flow_headers(FIVE_TUPLE, scenario.victim_flows)
    use_case = UseCase(scenario.use_case)
    acl = scenario_acl(use_case, victim_flows=victims)
    trace = build_trace(use_case, acl)
    steady_start = scenario.attack_start + scenario.t_attack + scenario.t_sleep + 2
    rows = []
    min_rate: dict[int, float] = {}
    for cores in cores_list:
        for rate in rates_list:
            sched = AttackSchedule(
                rate=rate,
                t_attack=scenario.t_attack,
                t_sleep=scenario.t_sleep,
                clone=clone_factor(rate),
                start=scenario.attack_start,
            )
            cfg = SimConfig(
                cores=cores,
                budget_per_core=scenario.budget_per_core,
                victim_offered=scenario.victim_offered,
                emc_enabled=scenario.emc,
                tick=scenario.tick,
                duration=scenario.duration,
                seed=scenario.seed,
                build_cache_map=False,
            )
            result = run(cfg, acl, [(trace, sched)], victims)
            attack_secs = [
                s
                for s in range(int(steady_start), int(scenario.duration))
                if sched.phase_at(s + 0.5) == "attack"
            ]
            mean = sum(result.fractions[s] for s in attack_secs) / len(attack_secs)
            dos = mean <= scenario.eps_down
            if dos and cores not in min_rate:
                min_rate[cores] = rate
            line = f"cores={cores} rate={rate:.0f} mean_attack_fraction={mean:.6f} dos={'yes' if dos else 'no'}"
            print(line)
            rows.append((cores, rate, mean, dos))
    for cores in cores_list:
        shown = f"{min_rate[cores]:.0f}" if cores in min_rate else "none"
        print(f"min_dos_rate cores={cores}: {shown}")
    if scenario.out and scenario.out != "out":
        path = Path(scenario.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["cores,rate,mean_attack_fraction,dos"]
        lines += [f"{c},{r:.0f},{m:.6f},{int(d)}" for c, r, m, d in rows]
        path.write_text("\n".join(lines) + "\n")
        print(f"wrote {path}")
    return 0


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--use-case", dest="use_case", choices=_VALID_USE_CASES)
    p.add_argument("--acl", help="ACL file (line format); default is the built-in table")
    p.add_argument("--trace", help="replay this trace file instead of generating one")
    p.add_argument("--tse", choices=_VALID_TSE, help="attack variant (default 1.0)")
    p.add_argument("--rate", type=float, help="attack rate in packets/second")
    p.add_argument("--t-attack", dest="t_attack", type=float, help="attack phase seconds")
    p.add_argument("--t-sleep", dest="t_sleep", type=float, help="sleep phase seconds")
    p.add_argument("--attack-start", dest="attack_start", type=float)
    p.add_argument("--cores", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--budget-per-core", dest="budget_per_core", type=float)
    p.add_argument("--victim-offered", dest="victim_offered", type=float)
    p.add_argument("--victim-flows", dest="victim_flows", type=int)
    p.add_argument("--emc", dest="emc", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--tick", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eps-down", dest="eps_down", type=float)
    p.add_argument("--eps-up", dest="eps_up", type=float)
    p.add_argument("--out", help="output file (gen-trace, sweep) or directory (run)")


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    overrides = {
        name: getattr(args, name, None) for name in _SCENARIO_FIELDS if hasattr(args, name)
    }
    return parse_config(getattr(args, "config", None), overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tsesim",
        description="Tuple-space flow-cache simulator and probe-trace toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-trace", help="generate a probe trace file")
    _add_scenario_flags(p_gen)

    p_run = sub.add_parser("run", help="simulate a scenario and write artifacts")
    _add_scenario_flags(p_run)

    p_map = sub.add_parser("render-map", help="render a cachemap.csv as a text grid")
    p_map.add_argument("csv", help="cache map CSV produced by `run`")

    p_sweep = sub.add_parser("sweep", help="grid of runs over cores and rates")
    _add_scenario_flags(p_sweep)
    p_sweep.add_argument("--cores-list", dest="cores_list", default="1,2,3,4")
    p_sweep.add_argument("--rates-list", dest="rates_list", default="1000,3000,6000,12000")

    args = parser.parse_args(argv)
    try:
        if args.command == "gen-trace":
            scenario = _scenario_from_args(args)
            if scenario.out == "out":
                scenario.out = f"{scenario.use_case}.trace"
            return cmd_gen_trace(scenario)
        if args.command == "run":
            return cmd_run(_scenario_from_args(args))
        if args.command == "render-map":
            return cmd_render_map(args.csv)
        if args.command == "sweep":
            scenario = _scenario_from_args(args)
            cores_list = [int(x) for x in args.cores_list.split(",") if x]
            rates_list = [float(x) for x in args.rates_list.split(",") if x]
            if not cores_list or not rates_list:
                raise ConfigError("cores-list and rates-list must be non-empty")
            if scenario.tse == "1.0":
                scenario.tse = "2.1"
            if "duration" not in _explicit(args):
                scenario.duration = 45.0
            return cmd_sweep(scenario, cores_list, rates_list)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _explicit(args: argparse.Namespace) -> set[str]:
    return {k for k, v in vars(args).items() if v is not None}


if __name__ == "__main__":
    raise SystemExit(main())
