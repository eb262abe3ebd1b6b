"""Two-layer flow cache: exact-match cache plus a ranked megaflow tuple space.

Lookups try the exact-match cache (EMC), then probe the megaflow cache's
subtables sequentially (one subtable per distinct wildcard mask), and fall
back to the slow path, whose result is cached.  Subtables are re-ranked by
per-interval hit counts once per sort interval; entries idle for the timeout
are expired; a brand-new subtable always enters the search order first.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .headers import (
    HeaderMask,
    HeaderValue,
    MaskedKey,
    apply_mask,
    header_hash64,
)
from .slowpath import Acl, Action, SynthesizedFlow, synthesize_megaflow


@dataclass(frozen=True)
class CostModel:
    """Per-probe cost units; calibration knobs, not measurements."""

    c_emc: float = 1.0
    c_sub: float = 1.0
    c_slow: float = 50.0


class HitPath(enum.Enum):
    EMC = "emc"
    MFC = "mfc"
    SLOW = "slow"


@dataclass(frozen=True)
class ClassifyResult:
    action: Action
    path: HitPath
    emc_probes: int
    subtables_probed: int
    cost_units: float


class EmcCache:
    """Fixed-size direct-mapped exact-match cache; full header is the key."""

    def __init__(self, capacity: int = 8192, enabled: bool = True):
        if capacity < 1:
            raise ValueError("EMC capacity must be >= 1")
        self.capacity = capacity
        self.enabled = enabled
        self.slots: dict[int, tuple[HeaderValue, Action]] = {}

    def lookup(self, h: HeaderValue) -> Optional[Action]:
        if not self.enabled:
            return None
        slot = self.slots.get(header_hash64(h) % self.capacity)
        if slot is not None and slot[0] == h:
            return slot[1]
        return None

    def insert(self, h: HeaderValue, action: Action) -> None:
        if not self.enabled:
            return
        self.slots[header_hash64(h) % self.capacity] = (h, action)

    @property
    def occupancy(self) -> int:
        return len(self.slots)


@dataclass
class MegaflowEntry:
    key: MaskedKey
    action: Action
    last_hit: float


@dataclass
class Subtable:
    mask: HeaderMask
    created_at: float
    entries: dict[MaskedKey, MegaflowEntry] = field(default_factory=dict)
    interval_hits: int = 0


@dataclass
class BatchResult:
    """Aggregate of one batch of classifications (engine fast path)."""

    packets: int = 0
    total_cost: float = 0.0
    slow_path: int = 0
    mfc_hits: int = 0
    emc_hits: int = 0
    created_masks: list[HeaderMask] = field(default_factory=list)


class FlowCache:
    """One classifier instance: EMC, megaflow tuple space, slow-path ACL.

    An instance expects one mutator at a time; run distinct instances for
    parallel experiments.
    """

    def __init__(
        self,
        acl: Acl,
        *,
        emc_enabled: bool = True,
        emc_capacity: int = 8192,
        costs: CostModel = CostModel(),
        idle_timeout: float = 10.0,
        sort_interval_ms: int = 1000,
    ):
        self.acl = acl
        self.emc = EmcCache(emc_capacity, emc_enabled)
        self.costs = costs
        self.idle_timeout = idle_timeout
        self.sort_interval_ms = sort_interval_ms
        # Search order is reversed in storage: the last element of _rev is
        # probed first, so creating a subtable is an O(1) append that leaves
        # every existing position untouched.
        self._rev: list[Subtable] = []
        self._revpos: dict[HeaderMask, int] = {}
        self._by_mask: dict[HeaderMask, Subtable] = {}
        self._expiry: list[tuple[float, int, HeaderMask, MaskedKey, float]] = []
        self._seq = itertools.count()
        self._synth_memo: dict[HeaderValue, SynthesizedFlow] = {}

    # -- views -------------------------------------------------------------

    def subtables(self) -> list[Subtable]:
        """Subtables in search order (index 0 probed first)."""
        return self._rev[::-1]

    @property
    def subtable_count(self) -> int:
        return len(self._rev)

    @property
    def entry_count(self) -> int:
        return sum(len(st.entries) for st in self._rev)

    def search_index(self, mask: HeaderMask) -> int:
        return len(self._rev) - 1 - self._revpos[mask]

    def entries(self) -> Iterable[tuple[MaskedKey, HeaderMask, Action]]:
        for st in self._rev:
            for e in st.entries.values():
                yield e.key, st.mask, e.action

    # -- core operations -----------------------------------------------------

    def synthesize(self, h: HeaderValue) -> SynthesizedFlow:
        flow = self._synth_memo.get(h)
        if flow is None:
            flow = synthesize_megaflow(h, self.acl)
            self._synth_memo[h] = flow
        return flow

    def emc_lookup(self, h: HeaderValue, now: float) -> Optional[Action]:
        return self.emc.lookup(h)

    def emc_insert(self, h: HeaderValue, action: Action) -> None:
        self.emc.insert(h, action)

    def mfc_lookup(self, h: HeaderValue, now: float) -> Optional[tuple[Action, int]]:
        """Probe subtables sequentially; on a hit, count it and refresh the entry."""
        for probed, st in enumerate(reversed(self._rev), start=1):
            key = apply_mask(h, st.mask)
            entry = st.entries.get(key)
            if entry is not None:
                st.interval_hits += 1
                entry.last_hit = now
                return entry.action, probed
        return None

    def mfc_insert(
        self, key: MaskedKey, mask: HeaderMask, action: Action, now: float
    ) -> tuple[bool, bool]:
        """Add an entry; returns (created_subtable, created_entry).

        A new mask creates a subtable at search index 0.  A duplicate
        (key, mask) only refreshes the entry's idle clock.
        """
        st = self._by_mask.get(mask)
        if st is None:
            st = Subtable(mask=mask, created_at=now)
            self._by_mask[mask] = st
            self._revpos[mask] = len(self._rev)
            self._rev.append(st)
            created = True
        else:
            created = False
        entry = st.entries.get(key)
        if entry is not None:
            entry.last_hit = now
            return created, False
        st.entries[key] = MegaflowEntry(key=key, action=action, last_hit=now)
        heapq.heappush(
            self._expiry, (now + self.idle_timeout, next(self._seq), mask, key, now)
        )
        return created, True

    def expire(self, now: float) -> tuple[list[tuple[MaskedKey, HeaderMask]], list[HeaderMask]]:
        """Remove entries idle for >= idle_timeout; drop emptied subtables.

        Returns (expired entries, removed subtable masks).
        """
        removed_entries: list[tuple[MaskedKey, HeaderMask]] = []
        removed_masks: list[HeaderMask] = []
        while self._expiry and self._expiry[0][0] <= now:
            _, _, mask, key, stamp = heapq.heappop(self._expiry)
            st = self._by_mask.get(mask)
            if st is None:
                continue
            entry = st.entries.get(key)
            if entry is None:
                continue
            if entry.last_hit != stamp:
                # Refreshed since queued; requeue at its current deadline.
                heapq.heappush(
                    self._expiry,
                    (
                        entry.last_hit + self.idle_timeout,
                        next(self._seq),
                        mask,
                        key,
                        entry.last_hit,
                    ),
                )
                continue
            del st.entries[key]
            removed_entries.append((key, mask))
            if not st.entries:
                del self._by_mask[mask]
                removed_masks.append(mask)
        if removed_masks:
            self._rev = [st for st in self._rev if st.mask in self._by_mask]
            self._revpos = {st.mask: i for i, st in enumerate(self._rev)}
        return removed_entries, removed_masks

    def rebalance(self, now: float) -> None:
        """Reorder subtables by interval hits (descending, stable) and reset counts."""
        order = sorted(self.subtables(), key=lambda st: -st.interval_hits)
        for st in order:
            st.interval_hits = 0
        self._rev = order[::-1]
        self._revpos = {st.mask: i for i, st in enumerate(self._rev)}

    def classify(self, h: HeaderValue, now: float) -> ClassifyResult:
        """Full pipeline for one packet: EMC, then MFC, then slow path."""
        c = self.costs
        emc_probes = 1 if self.emc.enabled else 0
        if emc_probes:
            action = self.emc.lookup(h)
            if action is not None:
                return ClassifyResult(action, HitPath.EMC, 1, 0, c.c_emc)
        hit = self.mfc_lookup(h, now)
        if hit is not None:
            action, probed = hit
            self.emc.insert(h, action)
            return ClassifyResult(
                action, HitPath.MFC, emc_probes, probed, emc_probes * c.c_emc + probed * c.c_sub
            )
        probed = self.subtable_count
        flow = self.synthesize(h)
        self.mfc_insert(flow.key, flow.mask, flow.action, now)
        self.emc.insert(h, flow.action)
        cost = emc_probes * c.c_emc + probed * c.c_sub + c.c_slow
        return ClassifyResult(flow.action, HitPath.SLOW, emc_probes, probed, cost)

    # -- engine fast paths ---------------------------------------------------
    #
    # The batch path prices every packet against the megaflow state at batch
    # start (a packet classified while a megaflow install is still in flight
    # misses too), then applies all mutations; EMC inserts stay immediate.
    # Results are found through the synthesis shortcut: with all entries
    # derived from one ACL, a header's matching entry is exactly the one its
    # own synthesis would produce, so a two-dict lookup replaces the
    # sequential probe while charging the same probe count the scan would
    # have.

    def classify_batch(self, headers: Iterable[HeaderValue], now: float) -> BatchResult:
        c = self.costs
        len0 = len(self._rev)
        res = BatchResult()
        batch_new: set[tuple[HeaderMask, MaskedKey]] = set()
        for h in headers:
            res.packets += 1
            emc_probes = 1 if self.emc.enabled else 0
            if emc_probes:
                action = self.emc.lookup(h)
                if action is not None:
                    res.emc_hits += 1
                    res.total_cost += c.c_emc
                    continue
            flow = self.synthesize(h)
            st = self._by_mask.get(flow.mask)
            entry = st.entries.get(flow.key) if st is not None else None
            if entry is not None and (flow.mask, flow.key) not in batch_new:
                pos = len0 - 1 - self._revpos[flow.mask]
                res.mfc_hits += 1
                res.total_cost += emc_probes * c.c_emc + (pos + 1) * c.c_sub
                st.interval_hits += 1
                entry.last_hit = now
                self.emc.insert(h, entry.action)
                continue
            res.slow_path += 1
            res.total_cost += emc_probes * c.c_emc + len0 * c.c_sub + c.c_slow
            created, _ = self.mfc_insert(flow.key, flow.mask, flow.action, now)
            if created:
                res.created_masks.append(flow.mask)
            batch_new.add((flow.mask, flow.key))
            self.emc.insert(h, flow.action)
        return res

    def probe_cost(self, h: HeaderValue) -> float:
        """Cost of classifying h right now, without mutating any state."""
        c = self.costs
        emc_probes = 1 if self.emc.enabled else 0
        if emc_probes and self.emc.lookup(h) is not None:
            return c.c_emc
        flow = self.synthesize(h)
        st = self._by_mask.get(flow.mask)
        if st is not None and flow.key in st.entries:
            return emc_probes * c.c_emc + (self.search_index(flow.mask) + 1) * c.c_sub
        return emc_probes * c.c_emc + self.subtable_count * c.c_sub + c.c_slow

    def credit_hits(self, h: HeaderValue, packets: int, now: float) -> None:
        """Bulk interval-hit increment and idle refresh for h's megaflow."""
        if packets <= 0:
            return
        flow = self.synthesize(h)
        st = self._by_mask.get(flow.mask)
        if st is None:
            return
        entry = st.entries.get(flow.key)
        if entry is None:
            return
        st.interval_hits += packets
        entry.last_hit = now

    # -- introspection ---------------------------------------------------------

    def snapshot_lines(self) -> list[str]:
        """Search-order dump: one line per subtable with mask, size and hits."""
        lines = []
        for i, st in enumerate(self.subtables()):
            hexmask = "/".join(
                format(v, f"0{(f.width + 3) // 4}x")
                for f, v in zip(st.mask.layout.fields, st.mask.values)
            )
            lines.append(f"#{i} mask={hexmask} entries={len(st.entries)} hits={st.interval_hits}")
        return lines
