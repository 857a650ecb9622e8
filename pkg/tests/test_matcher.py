import numpy as np
import pytest

from canonface.geometry import DimensionError
from canonface.matcher import (DenseCorrespondence, EmptyIndexError, TrackSet, build_index,
                               cycle, match_dense, match_dense_downsampled,
                               match_dense_exhaustive, track)


def _maps(rng, h=12, w=10):
    c = rng.normal(size=(h, w, 3))
    m = rng.random((h, w)) > 0.25
    return c, m


def test_match_dense_equals_exhaustive(rng):
    for _ in range(10):
        src, sm = _maps(rng)
        tgt, tm = _maps(rng, 9, 11)
        index = build_index(tgt, tm)
        a = match_dense(src, sm, index)
        b = match_dense_exhaustive(src, sm, index)
        assert np.array_equal(a.target, b.target)
        assert np.array_equal(a.distance, b.distance)
        assert np.array_equal(a.valid, b.valid) and np.array_equal(a.valid, sm)


def test_identity_pair_matches_itself(rng):
    c, m = _maps(rng)
    corr = match_dense(c, m, build_index(c, m))
    ident = DenseCorrespondence.identity(m)
    assert np.array_equal(corr.target, ident.target)
    assert not corr.distance.any()


def test_tie_rule_prefers_lowest_row_major_pixel():
    tgt = np.zeros((2, 2, 3))
    tgt[0, 1] = tgt[1, 0] = [1.0, 0, 0]
    tgt[0, 0] = tgt[1, 1] = [5.0, 0, 0]
    src = np.full((1, 1, 3), [1.0, 0, 0])
    corr = match_dense(src, np.ones((1, 1), bool), build_index(tgt, np.ones((2, 2), bool)))
    assert corr.target[0, 0].tolist() == [1.0, 0.0]  # (u=1, v=0) precedes (u=0, v=1)


def test_max_distance_cutoff(rng):
    src, sm = _maps(rng)
    tgt, tm = _maps(rng)
    index = build_index(tgt, tm)
    full = match_dense(src, sm, index)
    cut = match_dense(src, sm, index, max_distance=0.5)
    assert np.array_equal(cut.valid, sm & (full.distance <= 0.5))


def test_stride_one_equals_plain_and_stride_two_samples_grid(rng):
    src, sm = _maps(rng)
    tgt, tm = _maps(rng)
    a = match_dense(src, sm, build_index(tgt, tm))
    b = match_dense_downsampled(src, sm, tgt, tm, 1)
    assert np.array_equal(a.target, b.target) and np.array_equal(a.distance, b.distance)
    c = match_dense_downsampled(src, sm, tgt, tm, 2)
    assert (c.target[c.valid] % 2 == 0).all()


def test_index_errors(rng):
    c, _ = _maps(rng)
    with pytest.raises(EmptyIndexError):
        build_index(c, np.zeros(c.shape[:2], bool))
    with pytest.raises(ValueError):
        build_index(c, np.ones(c.shape[:2], bool), stride=0)
    with pytest.raises(DimensionError):
        build_index(c[..., :2], np.ones(c.shape[:2], bool))


def test_raster_round_trip(rng):
    src, sm = _maps(rng)
    corr = match_dense(src, sm, build_index(*_maps(rng)))
    r, v = corr.to_raster()
    back = DenseCorrespondence.from_raster(r, v)
    assert np.array_equal(back.valid, corr.valid)
    assert np.allclose(back.target, corr.target)


def test_cycle_of_identity_is_zero(rng):
    _, m = _maps(rng)
    ident = DenseCorrespondence.identity(m)
    disp, ok = cycle(ident, ident)
    assert np.array_equal(ok, m) and not disp.any()


def test_cycle_detects_offsets():
    m = np.ones((1, 3), bool)
    fwd = DenseCorrespondence.identity(m)
    bwd = DenseCorrespondence.identity(m)
    bwd.target[0, 2, 0] = 0.0
    disp, ok = cycle(fwd, bwd)
    assert disp.tolist() == [[0.0, 0.0, 2.0]] and ok.all()


def test_track_matches_per_frame_queries(rng):
    frames = [_maps(rng) for _ in range(4)]
    seeds = np.argwhere(frames[0][1])[:5][:, ::-1]
    ts = track(seeds, frames)
    assert np.array_equal(ts.positions[0], seeds) and not ts.distances[0].any()
    for f, (c, m) in enumerate(frames):
        corr = match_dense_exhaustive(frames[0][0], frames[0][1], build_index(c, m))
        assert np.array_equal(ts.positions[f], corr.target[seeds[:, 1], seeds[:, 0]])
    back = TrackSet.from_json(__import__("json").loads(ts.dumps()))
    assert np.array_equal(back.positions, ts.positions)


def test_track_rejects_bad_seeds(rng):
    frames = [_maps(rng)]
    with pytest.raises(ValueError):
        track([[99, 0]], frames)
    v, u = np.argwhere(~frames[0][1])[0]
    with pytest.raises(ValueError, match="not a valid pixel"):
        track([[u, v]], frames)
    with pytest.raises(ValueError):
        track([[0, 0]], [])
