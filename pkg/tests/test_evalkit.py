import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttlvc.evalkit import EvalPair, Features, WarpPath, dtw_align, f0_rmse, frame_mcd, make_report, mcd
from ttlvc.ndiff import save_features


def brute_force_cost(d: np.ndarray) -> float:
    """Exhaustive minimum over every monotone path, no dynamic-programming table shared with the code under test."""
    na, nb = d.shape

    @lru_cache(maxsize=None)
    def paths(i, j):
        if (i, j) == (na - 1, nb - 1):
            return [d[i, j]]
        out = []
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < na and j + dj < nb:
                out.extend(d[i, j] + c for c in paths(i + di, j + dj))
        return out

    return min(paths(0, 0))


def _valid(path: WarpPath, na: int, nb: int) -> bool:
    p = path.pairs
    steps = {(b[0] - a[0], b[1] - a[1]) for a, b in zip(p, p[1:])}
    return p[0] == (0, 0) and p[-1] == (na - 1, nb - 1) and steps <= {(1, 0), (0, 1), (1, 1)}


def test_dtw_identity_and_degenerate():
    a = np.random.default_rng(0).standard_normal((6, 3))
    path, cost = dtw_align(a, a)
    assert path.pairs == WarpPath.identity(6).pairs and cost == 0.0
    path, cost = dtw_align(np.zeros((1, 1)), np.zeros((3, 1)))
    assert path.pairs == [(0, 0), (0, 1), (0, 2)] and cost == 0.0


def test_dtw_rejects_empty():
    with pytest.raises(ValueError):
        dtw_align(np.zeros((0, 2)), np.zeros((2, 2)))


def test_dtw_matches_brute_force_200_seeds():
    shapes = [(na, nb) for na in range(1, 9) for nb in range(1, 9) if na * nb <= 64]
    for seed in range(200):
        rng = np.random.default_rng(seed)
        na, nb = shapes[rng.integers(len(shapes))]
        dim = int(rng.integers(1, 5))
        a, b = rng.standard_normal((na, dim)), rng.standard_normal((nb, dim))
        path, cost = dtw_align(a, b)
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        assert _valid(path, na, nb)
        assert cost == pytest.approx(brute_force_cost(d), abs=1e-12)
        assert cost == pytest.approx(sum(d[i, j] for i, j in path.pairs), abs=1e-12)


# --- MCD / F0 oracles ------------------------------------------------------------------


def test_mcd_examples():
    assert mcd(np.ones((3, 25)), np.ones((3, 25))) == 0.0
    assert abs(mcd(np.array([[1.0]]), np.array([[0.0]])) - 10 / math.log(10) * math.sqrt(2)) < 1e-12
    assert abs(mcd(np.array([[1.0]]), np.array([[0.0]])) - 6.1419) < 1e-4
    a = np.zeros((1, 25))
    b = a.copy()
    b[0, 7] = 0.5
    assert abs(mcd(a, b) - 4.342944819032518 * math.sqrt(2 * 0.25)) < 1e-9
    assert abs(mcd(a, b) - 3.0710) < 1e-4


def test_mcd_order_mismatch():
    with pytest.raises(ValueError):
        mcd(np.zeros((2, 3)), np.zeros((2, 4)))


def test_f0_examples():
    ident = WarpPath.identity(2)
    assert f0_rmse([100.0, 200.0], [100.0, 200.0], ident) == 0.0
    assert abs(f0_rmse([110.0, 190.0], [100.0, 200.0], ident) - 10.0) < 1e-9
    with pytest.raises(ValueError):
        f0_rmse([100.0, 0.0], [0.0, 0.0], ident)


def test_f0_unvoiced_converted_counts_full():
    ident = WarpPath.identity(2)
    assert f0_rmse([0.0, 200.0], [100.0, 200.0], ident) == pytest.approx(math.sqrt(100**2 / 2))
    assert f0_rmse([0.0, 200.0], [100.0, 200.0], ident, skip_unvoiced=True) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_mcd_symmetry(na, nb, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((na, 4)), rng.standard_normal((nb, 4))
    assert mcd(a, b) == pytest.approx(mcd(b, a), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.floats(0.01, 50.0), st.integers(0, 10_000))
def test_mcd_scale_law(n, k, seed):
    rng = np.random.default_rng(seed)
    diff = rng.standard_normal((n, 5))
    ref = rng.standard_normal((n, 5))
    ident = WarpPath.identity(n)
    assert mcd(ref + k * diff, ref, ident) == pytest.approx(k * mcd(ref + diff, ref, ident), rel=1e-9)
    assert np.allclose(frame_mcd(k * diff), k * frame_mcd(diff))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(60, 400), min_size=1, max_size=10), st.integers(1, 5), st.integers(0, 10_000))
def test_f0_invariant_to_mutual_unvoiced_padding(ref, pad, seed):
    rng = np.random.default_rng(seed)
    ref = np.array(ref)
    conv = np.where(rng.random(len(ref)) < 0.2, 0.0, ref + rng.normal(0, 20, len(ref)))
    base = f0_rmse(conv, ref, WarpPath.identity(len(ref)))
    z = np.zeros(pad)
    padded = f0_rmse(np.concatenate([conv, z]), np.concatenate([ref, z]), WarpPath.identity(len(ref) + pad))
    assert padded == pytest.approx(base, rel=1e-12)


# --- reports -----------------------------------------------------------------------------


def test_report_identity_pair():
    mel = np.random.default_rng(0).standard_normal((12, 80))
    f0 = np.full(12, 150.0)
    rep = make_report([EvalPair(Features(mel, f0), Features(mel, f0), "F-F")])
    rec = rep.records[0]
    assert rec["mcd"] == 0.0 and rec["f0_rmse"] == 0.0


def test_report_group_mean_and_source_row(tmp_path, monkeypatch):
    import ttlvc.evalkit as ek

    values = iter([(4.0, None), (6.0, None), (9.0, None)])
    monkeypatch.setattr(ek, "score", lambda conv, ref, order=25: next(values))
    f = Features(np.zeros((2, 80)))
    rep = make_report([EvalPair(f, f, "A", "ttlvc"), EvalPair(f, f, "A", "ttlvc", source=f)])
    assert rep.groups[("A", "ttlvc")]["mcd"] == 5.0
    assert rep.groups[("A", "Source")]["mcd"] == 9.0
    assert rep.groups[("A", "ttlvc")]["f0_rmse"] is None
    rep.write(tmp_path)
    assert "n/a" in (tmp_path / "report.tsv").read_text()


def test_report_lists_unreadable_inputs(tmp_path):
    mel = np.random.default_rng(1).standard_normal((5, 80)).astype(np.float32)
    save_features(tmp_path / "ok.mel", "MEL", mel=mel)
    (tmp_path / "bad.mel").write_bytes(b"junk")
    rep = make_report(
        [
            EvalPair(tmp_path / "ok.mel", tmp_path / "ok.mel", "g", id="good"),
            EvalPair(tmp_path / "bad.mel", tmp_path / "ok.mel", "g", id="broken"),
        ]
    )
    assert [r["id"] for r in rep.records] == ["good"]
    assert len(rep.errors) == 1 and rep.errors[0].startswith("broken")
    with pytest.raises(ValueError):
        make_report([])
