"""Tuple-space flow-cache simulator and probe-trace toolkit."""

from .headers import (
    FIVE_TUPLE,
    HYP,
    FieldSpec,
    HeaderLayout,
    HeaderMask,
    HeaderValue,
    MaskedKey,
    apply_mask,
    first_diff_bit,
    mask_union,
    megaflows_overlap,
    prefix_mask,
)
from .slowpath import Acl, Action, FlowRule, slowpath_lookup, synthesize_megaflow, validate_acl
from .flow_cache import ClassifyResult, CostModel, EmcCache, FlowCache, HitPath
from .attack import (
    AttackSchedule,
    Trace,
    UseCase,
    average_rate,
    build_trace,
    clone_factor,
    field_probe_values,
    schedule_emissions,
    simple_acl,
    use_case_acl,
)
from .engine import (
    Metrics,
    SimConfig,
    compute_goodput_fraction,
    metrics_extract,
    run,
    scenario_acl,
    victim_cost_probe,
    victim_flow_headers,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
