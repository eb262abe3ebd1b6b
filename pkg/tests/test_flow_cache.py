import random

import pytest

from tsesim.flow_cache import CostModel, FlowCache, HitPath
from tsesim.headers import FIVE_TUPLE, HYP, apply_mask, header, mask, megaflows_overlap
from tsesim.slowpath import Acl, Action, parse_acl_text, rule


def hyp_acl():
    return Acl.from_rules(
        HYP, [rule(HYP, 1, Action.ALLOW, hyp=0b001), rule(HYP, 0, Action.DENY)]
    )


def hv(v):
    return header(HYP, hyp=v)


def five_acl():
    return parse_acl_text(
        FIVE_TUPLE,
        """
        priority=100 dport=80 action=allow
        priority=99 ip_src=10.0.0.1 action=allow
        priority=98 sport=12345 action=allow
        priority=0 action=deny
        """,
    )


def rand_five(rng):
    return header(
        FIVE_TUPLE,
        ip_src=rng.getrandbits(32),
        ip_dst=rng.getrandbits(32),
        proto=rng.getrandbits(8),
        sport=rng.getrandbits(16),
        dport=rng.getrandbits(16),
    )


# -- EMC ---------------------------------------------------------------------


def test_emc_read_your_write():
    cache = FlowCache(hyp_acl())
    cache.emc_insert(hv(0b001), Action.ALLOW)
    assert cache.emc_lookup(hv(0b001), now=0.0) is Action.ALLOW
    assert cache.emc_lookup(hv(0b011), now=0.0) is None


def test_emc_disabled_always_misses():
    cache = FlowCache(hyp_acl(), emc_enabled=False)
    cache.emc_insert(hv(0b001), Action.ALLOW)
    assert cache.emc_lookup(hv(0b001), now=0.0) is None


def test_emc_collision_eviction_capacity_one():
    cache = FlowCache(hyp_acl(), emc_capacity=1)
    cache.emc_insert(hv(0b001), Action.ALLOW)
    cache.emc_insert(hv(0b010), Action.DENY)
    assert cache.emc_lookup(hv(0b001), now=0.0) is None
    assert cache.emc_lookup(hv(0b010), now=0.0) is Action.DENY
    assert cache.emc.occupancy <= 1


# -- MFC lookup / insert -------------------------------------------------------


def table_b_cache(emc=False):
    """Cache preloaded with the four golden rows.

    Rows #1 and #4 share mask 111 and therefore one subtable; the resulting
    search order over masks is [111, 100, 110].
    """
    cache = FlowCache(hyp_acl(), emc_enabled=emc)
    rows = [
        (0b010, 0b110, Action.DENY),
        (0b100, 0b100, Action.DENY),
        (0b001, 0b111, Action.ALLOW),
        (0b000, 0b111, Action.DENY),
    ]
    for key_bits, mask_bits, action in rows:
        m = mask(HYP, hyp=mask_bits)
        cache.mfc_insert(apply_mask(hv(key_bits), m), m, action, now=0.0)
    return cache


def test_mfc_lookup_empty():
    cache = FlowCache(hyp_acl())
    assert cache.mfc_lookup(hv(0b101), now=0.0) is None
    assert cache.subtable_count == 0


def test_mfc_lookup_probe_counts():
    cache = table_b_cache()
    assert [st.mask.values[0] for st in cache.subtables()] == [0b111, 0b100, 0b110]
    # 111&111=111 misses the {001,000} keys; the 100 subtable matches second.
    action, probed = cache.mfc_lookup(hv(0b111), now=0.0)
    assert action is Action.DENY
    assert probed == 2
    # Mask 111 holds both keys 001 and 000, so 000 hits the first subtable.
    action, probed = cache.mfc_lookup(hv(0b000), now=0.0)
    assert action is Action.DENY
    assert probed == 1


def test_mfc_insert_new_mask_ranked_first():
    cache = FlowCache(five_acl(), emc_enabled=False)
    ma = mask(FIVE_TUPLE, dport=0xFFFF)
    mb = mask(FIVE_TUPLE, sport=0x8000)
    h = header(FIVE_TUPLE, ip_src=1, ip_dst=2, proto=6, sport=3, dport=80)
    cache.mfc_insert(apply_mask(h, ma), ma, Action.ALLOW, now=0.0)
    cache.mfc_insert(apply_mask(h, mb), mb, Action.DENY, now=0.0)
    order = [st.mask for st in cache.subtables()]
    assert order == [mb, ma]
    assert cache.search_index(mb) == 0


def test_mfc_insert_same_mask_no_new_subtable():
    cache = FlowCache(hyp_acl())
    m = mask(HYP, hyp=0b111)
    cache.mfc_insert(apply_mask(hv(0b001), m), m, Action.ALLOW, now=0.0)
    created, new_entry = cache.mfc_insert(apply_mask(hv(0b000), m), m, Action.DENY, now=0.0)
    assert not created and new_entry
    assert cache.subtable_count == 1
    assert cache.entry_count == 2


def test_mfc_insert_duplicate_refreshes_only():
    cache = FlowCache(hyp_acl())
    m = mask(HYP, hyp=0b111)
    k = apply_mask(hv(0b001), m)
    cache.mfc_insert(k, m, Action.ALLOW, now=0.0)
    created, new_entry = cache.mfc_insert(k, m, Action.ALLOW, now=5.0)
    assert not created and not new_entry
    st = cache.subtables()[0]
    assert st.entries[k].last_hit == 5.0


# -- expiry --------------------------------------------------------------------


def test_expiry_boundaries():
    cache = FlowCache(hyp_acl())
    m = mask(HYP, hyp=0b111)
    k = apply_mask(hv(0b001), m)
    cache.mfc_insert(k, m, Action.ALLOW, now=0.0)
    cache.expire(9.9)
    assert cache.entry_count == 1
    cache.expire(10.0)
    assert cache.entry_count == 0
    assert cache.subtable_count == 0  # emptied subtable removed


def test_expiry_respects_refresh():
    cache = FlowCache(hyp_acl())
    m = mask(HYP, hyp=0b111)
    k = apply_mask(hv(0b001), m)
    cache.mfc_insert(k, m, Action.ALLOW, now=0.0)
    cache.mfc_lookup(hv(0b001), now=6.0)  # refresh
    cache.expire(10.0)
    assert cache.entry_count == 1
    expired, removed = cache.expire(16.0)
    assert cache.entry_count == 0
    assert expired == [(k, m)]
    assert removed == [m]


def test_expiry_random_soundness():
    rng = random.Random(5)
    cache = FlowCache(five_acl(), emc_enabled=False)
    last_hits = {}
    now = 0.0
    for _ in range(2000):
        now += rng.random() * 0.5
        h = rand_five(rng)
        flow = cache.synthesize(h)
        cache.mfc_insert(flow.key, flow.mask, flow.action, now)
        last_hits[(flow.key, flow.mask)] = now
        if rng.random() < 0.3:
            expired, _ = cache.expire(now)
            for key, m in expired:
                assert now - last_hits[(key, m)] >= cache.idle_timeout
        live = {(k, m) for k, m, _ in cache.entries()}
        for (k, m), t in last_hits.items():
            if now - t < cache.idle_timeout:
                assert (k, m) in live


# -- rebalance -----------------------------------------------------------------


def test_rebalance_orders_by_hits_and_resets():
    cache = FlowCache(five_acl(), emc_enabled=False)
    h = header(FIVE_TUPLE, ip_src=1, ip_dst=2, proto=6, sport=3, dport=80)
    masks = [
        mask(FIVE_TUPLE, dport=0xFFFF),
        mask(FIVE_TUPLE, sport=0xFFFF),
        mask(FIVE_TUPLE, proto=0xFF),
    ]
    for m in masks:
        cache.mfc_insert(apply_mask(h, m), m, Action.DENY, now=0.0)
    a, b, c = cache.subtables()  # current search order
    a.interval_hits = 5
    b.interval_hits = 100
    c.interval_hits = 1
    cache.rebalance(1.0)
    assert cache.subtables() == [b, a, c]
    assert all(st.interval_hits == 0 for st in cache.subtables())


def test_rebalance_all_zero_is_stable():
    cache = FlowCache(five_acl(), emc_enabled=False)
    h = header(FIVE_TUPLE, ip_src=1, ip_dst=2, proto=6, sport=3, dport=80)
    for m in [mask(FIVE_TUPLE, dport=0xFFFF), mask(FIVE_TUPLE, sport=0xFFFF)]:
        cache.mfc_insert(apply_mask(h, m), m, Action.DENY, now=0.0)
    before = cache.subtables()
    cache.rebalance(1.0)
    assert cache.subtables() == before


# -- classify -------------------------------------------------------------------


def test_classify_emc_on_second_hit():
    cache = FlowCache(hyp_acl(), emc_enabled=True)
    first = cache.classify(hv(0b001), now=0.0)
    second = cache.classify(hv(0b001), now=0.1)
    assert first.path is HitPath.SLOW
    assert second.path is HitPath.EMC
    assert second.cost_units == cache.costs.c_emc


def test_classify_fresh_header_slow_path():
    cache = FlowCache(hyp_acl(), emc_enabled=False)
    res = cache.classify(hv(0b101), now=0.0)
    assert res.path is HitPath.SLOW
    assert res.subtables_probed == 0
    assert cache.entry_count == 1
    assert res.cost_units == cache.costs.c_slow


def test_classify_hyp_sweep_builds_golden_table():
    cache = FlowCache(hyp_acl(), emc_enabled=False)
    for v in range(8):
        cache.classify(hv(v), now=0.0)
    rows = {(k.values[0], m.values[0], a) for k, m, a in cache.entries()}
    assert rows == {
        (0b001, 0b111, Action.ALLOW),
        (0b100, 0b100, Action.DENY),
        (0b010, 0b110, Action.DENY),
        (0b000, 0b111, Action.DENY),
    }


def test_classify_cost_formula():
    costs = CostModel(c_emc=2.0, c_sub=3.0, c_slow=40.0)
    cache = FlowCache(hyp_acl(), emc_enabled=True, costs=costs)
    res = cache.classify(hv(0b001), now=0.0)  # miss EMC, miss MFC (empty), slow
    assert res.cost_units == 2.0 + 0 * 3.0 + 40.0
    res = cache.classify(hv(0b000), now=0.0)  # miss EMC, probe 1 subtable, slow
    assert res.cost_units == 2.0 + 1 * 3.0 + 40.0
    res = cache.classify(hv(0b000), now=0.1)  # EMC hit
    assert res.cost_units == 2.0


# -- batch path vs sequential oracle -------------------------------------------


def test_batch_of_one_matches_sequential():
    rng = random.Random(17)
    headers = [rand_five(rng) for _ in range(400)]
    seq = FlowCache(five_acl(), emc_enabled=False)
    bat = FlowCache(five_acl(), emc_enabled=False)
    total_seq = 0.0
    total_bat = 0.0
    for i, h in enumerate(headers):
        now = i * 0.01
        total_seq += seq.classify(h, now).cost_units
        total_bat += bat.classify_batch([h], now).total_cost
    assert total_bat == pytest.approx(total_seq)
    assert {e for e in bat.entries()} == {e for e in seq.entries()}
    assert [st.mask for st in bat.subtables()] == [st.mask for st in seq.subtables()]


def test_batch_hit_cost_matches_linear_scan_position():
    """Fast-path probe counts agree with an independent sequential scan."""
    rng = random.Random(29)
    cache = FlowCache(five_acl(), emc_enabled=False)
    headers = [rand_five(rng) for _ in range(150)]
    for i, h in enumerate(headers):
        cache.classify(h, now=i * 0.01)
    cache.rebalance(2.0)
    for h in rng.sample(headers, 50):
        flow = cache.synthesize(h)
        scan_pos = None
        for pos, st in enumerate(cache.subtables()):
            if apply_mask(h, st.mask) in st.entries:
                scan_pos = pos
                break
        assert scan_pos == cache.search_index(flow.mask)
        assert cache.probe_cost(h) == (scan_pos + 1) * cache.costs.c_sub


def test_batch_duplicate_miss_within_tick_spawns_once():
    cache = FlowCache(five_acl(), emc_enabled=False)
    h = header(FIVE_TUPLE, ip_src=9, ip_dst=2, proto=6, sport=3, dport=81)
    res = cache.classify_batch([h, h, h], now=0.0)
    assert res.slow_path == 3  # installs are not visible within the batch
    assert len(res.created_masks) == 1
    assert cache.entry_count == 1


def test_probe_cost_is_read_only():
    cache = FlowCache(five_acl(), emc_enabled=False)
    h = header(FIVE_TUPLE, ip_src=9, ip_dst=2, proto=6, sport=3, dport=81)
    cache.classify(h, now=0.0)
    st = cache.subtables()[0]
    hits_before = st.interval_hits
    entry = next(iter(st.entries.values()))
    stamp = entry.last_hit
    cost = cache.probe_cost(h)
    assert cost == cache.costs.c_sub
    assert st.interval_hits == hits_before
    assert entry.last_hit == stamp


def test_credit_hits_bulk():
    cache = FlowCache(five_acl(), emc_enabled=False)
    h = header(FIVE_TUPLE, ip_src=9, ip_dst=2, proto=6, sport=3, dport=81)
    cache.classify(h, now=0.0)
    cache.credit_hits(h, 500, now=3.0)
    st = cache.subtables()[0]
    assert st.interval_hits == 500
    assert next(iter(st.entries.values())).last_hit == 3.0


# -- pipeline properties ------------------------------------------------------


def test_fuzz_disjointness_and_ranking_properties():
    rng = random.Random(97)
    cache = FlowCache(five_acl(), emc_enabled=False)
    now = 0.0
    for _ in range(3000):
        now += 0.01
        op = rng.random()
        if op < 0.8:
            h = rand_five(rng)
            flow = cache.synthesize(h)
            existed = any(st.mask == flow.mask for st in cache.subtables())
            cache.classify(h, now)
            if not existed:
                assert cache.search_index(flow.mask) == 0  # new subtable ranks first
        elif op < 0.9:
            cache.expire(now)
        else:
            pre = {id(st): st.interval_hits for st in cache.subtables()}
            cache.rebalance(now)
            seq = [pre[id(st)] for st in cache.subtables()]
            assert all(a >= b for a, b in zip(seq, seq[1:]))
    entries = list(cache.entries())
    for i, (k1, m1, _) in enumerate(entries):
        for k2, m2, _ in entries[i + 1 :]:
            assert not megaflows_overlap((k1, m1), (k2, m2))


def test_snapshot_lines_format():
    cache = table_b_cache()
    lines = cache.snapshot_lines()
    assert len(lines) == 3
    assert lines[0].startswith("#0 mask=7 entries=2")
    assert "hits=" in lines[0]
