import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dawm.data import (BadMagicError, DataIntegrityError, DimensionMismatchError, Episode, TrajectorySegment,
                       Transition, TruncatedFileError, VersionMismatchError, build_dataset, compute_norm_stats,
                       compute_rtg, denormalize, discounted_rtg_curve, export_csv, extract_segment_arrays,
                       extract_segments, load_dataset, n_segments, normalize, round_up_one_sig, save_dataset)

finite = st.floats(-100, 100, allow_nan=False)


def make_episode(rng, T=12, d_s=3, d_a=2):
    return Episode(rng.normal(size=(T + 1, d_s)), rng.uniform(-1, 1, (T, d_a)), rng.normal(size=T))


def test_rtg_matches_loop():
    r = [1.0, -2.0, 0.5, 3.0]
    expected = 0.0
    for k, x in enumerate(r):
        expected += 0.9 ** k * x
    assert compute_rtg(r, 0.9) == pytest.approx(expected, abs=1e-12)


def test_rtg_rejects_nan_and_bad_gamma():
    with pytest.raises(DataIntegrityError):
        compute_rtg([1.0, math.nan], 0.99)
    with pytest.raises(ValueError):
        compute_rtg([1.0], 1.5)


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0.5, 1.0))
def test_rtg_curve_head_is_full_window_rtg(r, gamma):
    curve = discounted_rtg_curve(np.array(r), gamma)
    assert curve[0] == pytest.approx(compute_rtg(r, gamma), rel=1e-9, abs=1e-9)
    # bellman form between consecutive entries
    for i in range(len(r) - 1):
        assert curve[i] == pytest.approx(r[i] + gamma * curve[i + 1], rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("x,expected", [(0.0, 1.0), (-3.0, 1.0), (1.0, 1.0), (1.2, 2.0), (37.0, 40.0),
                                        (400.0, 400.0), (0.031, 0.04)])
def test_round_up_one_sig(x, expected):
    assert round_up_one_sig(x) == pytest.approx(expected)


@given(st.floats(1e-6, 1e6))
def test_round_up_one_sig_bounds(x):
    y = round_up_one_sig(x)
    assert y >= x * (1 - 1e-12)
    assert y <= 10 * x


def test_transition_validation():
    s = np.zeros(3)
    with pytest.raises(DataIntegrityError):
        Transition(s, np.zeros(2), 0.0, np.zeros(4))
    with pytest.raises(DataIntegrityError):
        Transition(s, np.array([np.inf, 0.0]), 0.0, s)
    t = Transition(s, np.zeros(2), 1.0, s)
    assert not t.synthetic


def test_segment_flat_roundtrip(rng):
    seg = TrajectorySegment(rng.normal(size=(4, 3)), rng.normal(size=4))
    back = TrajectorySegment.from_array(seg.flat(), 3)
    assert seg.horizon == 3
    np.testing.assert_array_equal(back.states, seg.states)
    np.testing.assert_array_equal(back.rewards, seg.rewards)
    with pytest.raises(DataIntegrityError):
        TrajectorySegment(np.zeros((4, 3)), np.zeros(3))


def test_episode_shape_check(rng):
    with pytest.raises(DataIntegrityError):
        Episode(np.zeros((5, 2)), np.zeros((5, 1)), np.zeros(5))
    ep = make_episode(rng, T=9)
    assert len(ep) == 10 and ep.n_steps == 9


def test_norm_stats_match_numpy(rng):
    eps = [make_episode(rng) for _ in range(4)]
    ns = compute_norm_stats(eps)
    allS = np.concatenate([e.states for e in eps])
    np.testing.assert_allclose(ns.state_mean, allS.mean(0), atol=1e-12)
    np.testing.assert_allclose(ns.state_std, allS.std(0), atol=1e-12)


def test_normalize_roundtrip(rng):
    ds = build_dataset([make_episode(rng) for _ in range(3)])
    back = denormalize(normalize(ds))
    for a, b in zip(ds.episodes, back.episodes):
        np.testing.assert_allclose(a.states, b.states, atol=1e-12)
        np.testing.assert_allclose(a.rewards, b.rewards, atol=1e-12)
        np.testing.assert_array_equal(a.actions, b.actions)


def test_transitions_chain(small_dataset):
    tr = small_dataset.transitions()
    n = small_dataset.n_transitions
    assert all(v.shape[0] == n for v in tr.values())
    # within an episode, next_state[t] == state[t+1]
    T = small_dataset.episodes[0].n_steps
    np.testing.assert_array_equal(tr["next_states"][:T - 1], tr["states"][1:T])


@pytest.mark.parametrize("H", [1, 3, 7])
def test_segment_counts_and_content(small_dataset, H):
    seg = extract_segment_arrays(small_dataset, H)
    per_ep = n_segments(len(small_dataset.episodes[0]), H)
    assert len(seg) == per_ep * len(small_dataset.episodes)
    ep = small_dataset.episodes[0]
    i = 2
    np.testing.assert_array_equal(seg.x0[i, :, :4], ep.states[i + 1:i + H + 2])
    np.testing.assert_array_equal(seg.x0[i, :, 4], ep.rewards[i:i + H + 1])
    assert seg.rtg[i] == pytest.approx(compute_rtg(ep.rewards[i:i + H + 1], 0.99) / small_dataset.rtg_scale)


def test_segment_rtg_bounded_by_scale(small_dataset):
    seg = extract_segment_arrays(small_dataset, 7)
    assert np.all(np.abs(seg.rtg) <= 1.0 + 1e-12)


def test_extract_segments_objects(small_dataset):
    pairs = extract_segments(small_dataset, 3)
    cond, seg = pairs[0]
    assert seg.horizon == 3 and cond.state.shape == (4,)


def test_horizon_too_long(rng):
    ds = build_dataset([make_episode(rng, T=4)])
    with pytest.raises(DataIntegrityError):
        extract_segment_arrays(ds, 5)
    with pytest.raises(ValueError):
        extract_segment_arrays(ds, 0)


def test_save_load_roundtrip(tmp_path, small_dataset):
    p = tmp_path / "d.dawm"
    save_dataset(small_dataset, p)
    back = load_dataset(p)
    assert back.rtg_scale == small_dataset.rtg_scale and back.tier == small_dataset.tier
    for a, b in zip(small_dataset.episodes, back.episodes):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)


def test_load_errors(tmp_path, small_dataset):
    p = tmp_path / "d.dawm"
    save_dataset(small_dataset, p)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(BadMagicError):
        load_dataset(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-16])
    with pytest.raises(TruncatedFileError):
        load_dataset(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0" * 8)
    with pytest.raises(DimensionMismatchError):
        load_dataset(tmp_path / "long")
    (tmp_path / "ver").write_bytes(raw.replace(b'"format_version": 1', b'"format_version": 9'))
    with pytest.raises(VersionMismatchError):
        load_dataset(tmp_path / "ver")


def test_export_csv_rows(tmp_path, small_dataset):
    p = tmp_path / "d.csv"
    export_csv(small_dataset, p)
    lines = p.read_text().splitlines()
    assert len(lines) == small_dataset.n_transitions + 1
    assert lines[0].startswith("episode,t,s0")
