import numpy as np
import pytest

from layout_retouch.attention import (LAYOUT_BRANCH, REFERENCE_BRANCH, AttentionTrace, SwapPolicy,
                                      attach_blend, blend_gate, describe_schedule, plan_overrides)
from layout_retouch.backends import CROSS, SELF, AttentionEntry
from layout_retouch.core import PipelineConfig
from layout_retouch.errors import TraceError, ValidationError

LAYERS = ((0, SELF), (1, CROSS), (2, SELF), (3, CROSS))


def policy(**kw):
    args = dict(T=50, lambda2=10, layers=LAYERS, blend_start=31)
    args.update(kw)
    return SwapPolicy(**args)


def filled_trace(name, T=50, fill=0.0):
    tr = AttentionTrace(name)
    for s in range(1, T + 1):
        for index, kind in LAYERS:
            a = np.full((4, 2), fill + s, np.float32)
            tr.entries[(s, index, kind)] = AttentionEntry(a, a + 1, a + 2, a, a + 3)
    return tr


def test_branch_boundary():
    p = policy()
    assert p.branch(40) == LAYOUT_BRANCH
    assert p.branch(41) == REFERENCE_BRANCH
    with pytest.raises(ValidationError):
        p.branch(0)
    with pytest.raises(ValidationError):
        p.branch(51)


def test_lambda2_zero_is_all_layout():
    p = policy(lambda2=0)
    assert all(p.branch(s) == LAYOUT_BRANCH for s in range(1, 51))
    p = policy(lambda2=50)
    assert all(p.branch(s) == REFERENCE_BRANCH for s in range(1, 51))


def test_blend_gate_boundaries():
    p = policy()
    assert not blend_gate(p, 30)
    assert blend_gate(p, 31)
    assert blend_gate(policy(blend_start=1), 1)
    assert not blend_gate(policy(blend_enabled=False), 50)


def test_schedule_partitions_iterations():
    plan = describe_schedule(policy())
    assert [row["s"] for row in plan] == list(range(1, 51))
    assert [row["i"] for row in plan] == list(range(50, 0, -1))
    layout = [r["s"] for r in plan if r["branch"] == LAYOUT_BRANCH]
    ref = [r["s"] for r in plan if r["branch"] == REFERENCE_BRANCH]
    assert layout == list(range(1, 41)) and ref == list(range(41, 51))
    assert [r["s"] for r in plan if r["blend"]] == list(range(31, 51))


def test_layout_branch_hands_over_values_verbatim():
    lay, ref = filled_trace("layout"), filled_trace("reference", fill=100)
    bundle = plan_overrides(policy(), 7, lay, ref)
    assert set(bundle) == {0, 1, 2, 3}
    for index, kind in LAYERS:
        e = lay.get(7, index, kind)
        assert bundle[index].q is e.q and bundle[index].k is e.k and bundle[index].v is e.v


def test_late_query_kept_when_early_query_swap_off():
    lay, ref = filled_trace("layout"), filled_trace("reference")
    bundle = plan_overrides(policy(early_query_swap=False), 7, lay, ref)
    assert bundle[0].q is None and bundle[0].k is not None
    assert bundle[1].q is not None


def test_reference_branch_swaps_self_kv_only():
    lay, ref = filled_trace("layout"), filled_trace("reference", fill=100)
    bundle = plan_overrides(policy(), 45, lay, ref)
    assert set(bundle) == {0, 2}
    for index in (0, 2):
        e = ref.get(45, index, SELF)
        assert bundle[index].q is None
        assert bundle[index].k is e.k and bundle[index].v is e.v


def test_missing_trace_entry():
    lay = filled_trace("layout", T=10)
    with pytest.raises(TraceError) as info:
        plan_overrides(policy(), 11, lay, lay)
    assert info.value.step == 11


def test_trace_rejects_duplicates(personalized):
    tr = AttentionTrace("x")
    a = np.zeros((2, 2))
    taps = {0: AttentionEntry(a, a, a, a, a)}
    tr.record(1, taps, personalized.catalog)
    with pytest.raises(ValidationError):
        tr.record(1, taps, personalized.catalog)
    assert tr.steps() == [1]


def test_attach_blend_targets_self_layers():
    lay = filled_trace("layout")
    bundle = plan_overrides(policy(), 35, lay, lay)
    out = attach_blend(bundle, policy(), 35, lay, np.full((2, 2), 0.7))
    for index in (0, 2):
        assert out[index].blend_source is lay.get(35, index, SELF).phi
        assert out[index].blend_mask.shape == (4,)
        assert out[index].q is bundle[index].q
    assert out[1].blend_source is None


def test_policy_from_config(personalized):
    p = SwapPolicy.from_config(PipelineConfig(), personalized)
    assert p.layers == LAYERS
    assert SwapPolicy.from_config(PipelineConfig(swap_layers=(0,)), personalized).layers == ((0, SELF),)
    with pytest.raises(ValidationError):
        SwapPolicy.from_config(PipelineConfig(swap_layers=(9,)), personalized)
