import numpy as np
import pytest

from knowe.classifier import logits
from knowe.data import LAYOUTS, SyntheticParams, layout_stream, make_session_stream, generate_synthetic, build_hierarchy
from knowe.errors import ConfigError
from knowe.protocol import (
    PRESETS,
    RunFlags,
    evaluate,
    run_base_session,
    run_experiment,
    run_incremental_session,
)


@pytest.fixture(scope="module")
def knowe_trace(desk_stream, quick_preset):
    snaps = []
    probes = desk_stream.base_test.X[:20]

    def hook(t, model):
        snaps.append((model.head.W.copy(), model.net.checksum(), logits(model.head, model.net.features(probes))))

    exp = run_experiment(desk_stream, RunFlags(), quick_preset, 0, on_session_end=hook)
    return exp, snaps


def test_head_grows_by_one_block_per_session(desk_stream, knowe_trace):
    _, snaps = knowe_trace
    for t, (W, _, _) in enumerate(snaps):
        assert W.shape[1] == desk_stream.R + desk_stream.C * t


def test_frozen_parts_unchanged_bitwise(knowe_trace):
    _, snaps = knowe_trace
    for (W0, c0, _), (W1, c1, _) in zip(snaps, snaps[1:]):
        assert c0 == c1
        assert np.array_equal(W1[:, : W0.shape[1]], W0)


def test_existing_logits_never_move(knowe_trace):
    _, snaps = knowe_trace
    for (_, _, o0), (_, _, o1) in zip(snaps, snaps[1:]):
        assert np.array_equal(o1[:, : o0.shape[1]], o0)


def test_new_classes_learned(knowe_trace):
    exp, _ = knowe_trace
    assert all(r.now_acc >= 0.6 for r in exp.reports[1:])


def test_confusion_consistent_with_accuracy(desk_stream, knowe_trace):
    exp, _ = knowe_trace
    for r in exp.reports:
        assert r.confusion.sum() == r.n_queries == len(desk_stream.queries[r.t])
        assert abs(np.trace(r.confusion) / r.n_queries - r.A_t) < 1e-12


def test_summary_matches_reports(knowe_trace):
    exp, _ = knowe_trace
    s = exp.summary
    assert s.A_t == [r.A_t for r in exp.reports]
    assert abs(s.A_bar - np.mean(s.A_t)) < 1e-12
    assert s.block_norms == exp.reports[-1].block_norms


def test_finetuning_baseline_collapses_on_coarse_queries(desk_stream):
    exp = run_experiment(desk_stream, RunFlags.for_mode("ft_baseline"), PRESETS["desk"], 0)
    assert exp.reports[2].A_c < 0.05
    assert exp.summary.F > 0


def test_joint_upper_bound_close_to_knowe(desk_stream, quick_preset, knowe_trace):
    exp, _ = knowe_trace
    joint = run_experiment(desk_stream, RunFlags(mode="joint_upper_bound"), quick_preset, 0)
    assert joint.summary.A_bar >= exp.summary.A_bar - 0.02


def test_base_model_is_reused_without_mutation(desk_stream, quick_preset):
    base = run_base_session(desk_stream, RunFlags(), quick_preset, 0)
    before = base.head.W.copy()
    a = run_experiment(desk_stream, RunFlags(), quick_preset, 0, base=base)
    b = run_experiment(desk_stream, RunFlags(), quick_preset, 0)
    assert np.array_equal(base.head.W, before) and base.t == 0
    assert a.summary.A_t == b.summary.A_t


def test_session_order_enforced(desk_stream, quick_preset):
    m = run_base_session(desk_stream, RunFlags(), quick_preset, 0)
    with pytest.raises(ConfigError):
        run_incremental_session(m, desk_stream, 2, RunFlags(), quick_preset, 0)


def test_unknown_mode():
    with pytest.raises(ConfigError):
        RunFlags(mode="replay")


def test_zero_session_stream(quick_preset):
    ds = generate_synthetic(build_hierarchy(3, 2), SyntheticParams(), 0)
    s = make_session_stream(ds, C=2, K=5, H=15, T=0, seed=0)
    exp = run_experiment(s, RunFlags(), quick_preset, 0)
    assert len(exp.reports) == 1
    assert exp.summary.F is None
    assert exp.reports[0].A_f is None and exp.reports[0].now_acc is None


def test_no_coarse_queries_once_all_refined(quick_preset):
    s = layout_stream(LAYOUTS["cifar"], SyntheticParams(), 1)
    exp = run_experiment(s, RunFlags(), quick_preset, 1)
    assert exp.reports[-1].A_c is None
    assert exp.reports[0].A_f is None
    # F needs coarse accuracy at every session before T
    undefined = any(a is None for a in exp.summary.A_c[1:-1])
    assert (exp.summary.F is None) == undefined


def test_evaluate_is_pure(desk_stream, knowe_trace):
    exp, _ = knowe_trace
    a = evaluate(exp.model, desk_stream, desk_stream.T)
    b = evaluate(exp.model, desk_stream, desk_stream.T)
    assert np.array_equal(a.confusion, b.confusion)
