import numpy as np
import numpy.testing as npt
import pytest

import fedfusion.numcore as nc
from fedfusion.alignment import (
    AlignmentSet,
    apply_alignment,
    apply_alignment_batch,
    fit_decay_rate,
    sinkhorn,
)
from fedfusion.numcore import ContractError, Matrix, NumericDomainError, ShapeError


def _gather_matrix(p: np.ndarray) -> np.ndarray:
    """Matrix M with M @ x == x[p]; its transpose undoes the permutation."""
    d = len(p)
    m = np.zeros((d, d))
    m[np.arange(d), p] = 1.0
    return m


# ---------------------------------------------------------------------------
# sinkhorn


def test_sinkhorn_fixed_point_exact():
    k0 = np.array([[0.25, 0.75], [0.75, 0.25]])
    for t in (1, 3, 10):
        kt, _ = sinkhorn(Matrix(k0), t)
        npt.assert_array_equal(kt.data, k0)


def test_sinkhorn_all_ones_one_iteration():
    kt, diag = sinkhorn(Matrix(np.ones((2, 2))), 1)
    npt.assert_array_equal(kt.data, np.full((2, 2), 0.5))
    # residual hits the floor after the first iteration
    assert diag.residuals[0] > 1.0
    assert diag.residuals[1] < 1e-13


def test_sinkhorn_near_permutation_recovers_permutation():
    rng = np.random.default_rng(2)
    p = np.eye(6)[rng.permutation(6)]
    k0 = p + 1e-9 * rng.uniform(0.5, 1.0, size=(6, 6))
    kt, _ = sinkhorn(Matrix(k0), 100)
    npt.assert_allclose(kt.data, p, atol=1e-6)


def test_sinkhorn_rejects_nonpositive():
    with pytest.raises(NumericDomainError):
        sinkhorn(Matrix([[1.0, 0.0], [0.5, 1.0]]), 3)


def test_sinkhorn_rejects_rectangular():
    with pytest.raises(ShapeError):
        sinkhorn(Matrix(np.ones((2, 3))), 3)


def test_sinkhorn_row_col_sums_within_residual():
    rng = np.random.default_rng(4)
    k0 = rng.uniform(0.1, 1.0, size=(9, 9))
    kt, diag = sinkhorn(Matrix(k0), 12)
    res = diag.residuals[-1]
    assert np.all(np.abs(kt.data.sum(axis=0) - 1.0) <= res + 1e-15)
    assert np.all(np.abs(kt.data.sum(axis=1) - 1.0) <= res + 1e-15)


def test_sinkhorn_residual_below_1e8_at_t50_random_16x16():
    rng = np.random.default_rng(0)
    k0 = np.exp(rng.normal(0.0, 1.5, size=(16, 16)))
    _, diag = sinkhorn(Matrix(k0), 50)
    assert diag.residuals[-1] < 1e-8
    # residuals non-increasing after burn-in
    tail = diag.residuals[2:]
    assert np.all(np.diff(tail) <= 1e-15)


def test_sinkhorn_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    k0 = rng.uniform(0.3, 1.5, size=(4, 4))
    w = rng.normal(size=(4, 4))

    def f(params):
        kt, _ = sinkhorn(params[0], 7)
        return nc.sum_all(nc.hadamard(Matrix(w), kt))

    report = nc.grad_check(f, [k0], tol=1e-4)
    assert report.passed, str(report)


def test_sinkhorn_gradient_through_exp_parameterization():
    rng = np.random.default_rng(9)
    s = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 3))

    def f(params):
        kt, _ = sinkhorn(nc.exp(params[0]), 5)
        return nc.sum_all(nc.hadamard(Matrix(w), kt))

    assert nc.grad_check(f, [s], tol=1e-4).passed


# ---------------------------------------------------------------------------
# decay diagnostics


def test_fit_decay_rate_respects_spectral_bound():
    rng = np.random.default_rng(0)
    k0 = np.exp(rng.normal(0.0, 1.5, size=(8, 8)))
    _, diag = sinkhorn(Matrix(k0), 50)
    fit = fit_decay_rate(diag)
    assert fit.sufficient
    assert fit.slope <= fit.two_log_sigma2 + 0.1


def test_fit_decay_rate_insufficient_signal_is_not_an_error():
    _, diag = sinkhorn(Matrix(np.ones((3, 3))), 30)
    fit = fit_decay_rate(diag)
    assert not fit.sufficient
    assert np.isnan(fit.slope)


def test_near_permutation_exhibits_slow_regime():
    rng = np.random.default_rng(1)
    p = np.eye(8)[rng.permutation(8)]
    k0 = p + 2e-4 * rng.uniform(0.5, 1.0, size=(8, 8))
    _, diag = sinkhorn(Matrix(k0), 40)
    ratios = diag.residuals[3:40] / diag.residuals[2:39]
    assert np.all(ratios > 0.99)
    assert diag.sigma2 > 0.99


def test_diagnostics_csv_round_trip(tmp_path):
    _, diag = sinkhorn(Matrix(np.random.default_rng(3).uniform(0.2, 1, (5, 5))), 10)
    path = tmp_path / "diag.csv"
    diag.write_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "iteration,residual"
    assert len(rows) == 12
    vals = [float(r.split(",")[1]) for r in rows[1:]]
    npt.assert_allclose(vals, diag.residuals)


# ---------------------------------------------------------------------------
# alignment sets


def test_mode_none_stacks_latents():
    aset = AlignmentSet.create("none", n_clients=3, d=4)
    rng = np.random.default_rng(5)
    latents = [Matrix(rng.normal(size=(4, 1))) for _ in range(3)]
    hk = apply_alignment(aset, latents)
    want = np.hstack([l.data for l in latents]).T
    npt.assert_array_equal(hk.data, want)


def test_permutation_alignment_restores_canonical_stack():
    rng = np.random.default_rng(6)
    d, n = 5, 3
    aset = AlignmentSet.create("soft", n_clients=n, d=d, seed=0)
    canonical = [rng.normal(size=(d, 1)) for _ in range(n)]
    perms = [rng.permutation(d) for _ in range(n)]
    # overwrite the learned maps with the exact inverse permutations
    for i, p in enumerate(perms):
        aset.matrices[i] = _gather_matrix(p).T
    latents = [Matrix(canonical[i][perms[i]]) for i in range(n)]
    hk = apply_alignment(aset, latents)
    want = np.hstack(canonical).T
    npt.assert_array_equal(hk.data, want)


def test_rectangular_alignment_output_width():
    aset = AlignmentSet.create("soft", n_clients=2, d=6, d_out=4, seed=1)
    latents = [Matrix(np.random.default_rng(7).normal(size=(6, 1))) for _ in range(2)]
    assert apply_alignment(aset, latents).shape == (2, 4)


def test_alignment_shape_error_names_client():
    aset = AlignmentSet.create("soft", n_clients=2, d=4, seed=2)
    good = Matrix(np.zeros((4, 1)))
    bad = Matrix(np.zeros((3, 1)))
    with pytest.raises(ShapeError, match="client 1"):
        apply_alignment(aset, [good, bad])


def test_tied_mode_shares_one_matrix():
    aset = AlignmentSet.create("tied", n_clients=4, d=3, seed=3)
    assert len(aset.matrices) == 1
    assert list(aset.params()) == ["P"]
    maps = aset.effective_all()
    for m in maps[1:]:
        npt.assert_array_equal(m.data, maps[0].data)


def test_hard_mode_effective_is_doubly_stochastic():
    aset = AlignmentSet.create("hard", n_clients=2, d=5, seed=4, n_iterations=30)
    p = aset.effective(0)
    npt.assert_allclose(p.data.sum(axis=0), np.ones(5), atol=1e-6)
    npt.assert_allclose(p.data.sum(axis=1), np.ones(5), atol=1e-6)
    assert np.all(p.data > 0)


def test_hard_mode_requires_square():
    with pytest.raises(ContractError):
        AlignmentSet.create("hard", n_clients=2, d=5, d_out=4)


def test_soft_init_is_noisy_identity():
    aset = AlignmentSet.create("soft", n_clients=2, d=6, seed=5)
    for m in aset.matrices:
        npt.assert_allclose(m, np.eye(6), atol=0.011)
        assert not np.array_equal(m, np.eye(6))


def test_soft_permutation_init_invariance_exact():
    rng = np.random.default_rng(11)
    d, n, m = 5, 3, 7
    base = [rng.normal(size=(m, d)) for _ in range(n)]
    p_list = [rng.permutation(d) for _ in range(n)]

    plain = AlignmentSet.create("none", n_clients=n, d=d)
    out_plain = apply_alignment_batch(plain, [Matrix(b) for b in base])

    aligned = AlignmentSet.create("soft", n_clients=n, d=d, seed=0)
    for i, p in enumerate(p_list):
        aligned.matrices[i] = _gather_matrix(p).T
    out_aligned = apply_alignment_batch(
        aligned, [Matrix(base[i][:, p_list[i]]) for i in range(n)])

    for a, b in zip(out_aligned, out_plain):
        npt.assert_array_equal(a.data, b.data)


def test_batch_alignment_matches_per_sample():
    rng = np.random.default_rng(13)
    d, n, m = 4, 2, 6
    aset = AlignmentSet.create("soft", n_clients=n, d=d, seed=6)
    batches = [rng.normal(size=(m, d)) for _ in range(n)]
    outs = apply_alignment_batch(aset, [Matrix(b) for b in batches])
    for k in range(m):
        hk = apply_alignment(aset, [Matrix(b[k : k + 1].T) for b in batches])
        got = np.vstack([o.data[k] for o in outs])
        npt.assert_allclose(got, hk.data, atol=1e-14)
