"""Feature alignment across clients: free per-client matrices (soft), a
single shared matrix (tied), or doubly stochastic matrices produced by a
truncated Sinkhorn-Knopp iteration (hard), plus convergence diagnostics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Matrix, NumericDomainError

MODES = ("none", "soft", "hard", "tied")
RESIDUAL_FLOOR = 1e-13


@dataclass
class SinkhornDiagnostics:
    """Residual trajectory and spectral data for one sinkhorn() call.

    residuals[j] is ||[K_j^T 1; K_j 1] - [1; 1]||_2 with K_0 the input,
    so the array has T+1 entries.
    """

    residuals: np.ndarray
    sigma2: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "residual"])
            for j, r in enumerate(self.residuals):
                writer.writerow([j, repr(float(r))])


def _balance_residual(k: np.ndarray) -> float:
    col_dev = k.sum(axis=0) - 1.0
    row_dev = k.sum(axis=1) - 1.0
    return float(np.sqrt(np.sum(col_dev ** 2) + np.sum(row_dev ** 2)))


def sinkhorn(k0: Matrix, n_iterations: int) -> tuple[Matrix, SinkhornDiagnostics]:
    """Truncated Sinkhorn-Knopp balancing of a strictly positive square matrix.

    Each iteration updates the column scaling from the current row scaling
    and then the row scaling from the new column scaling:
        c <- 1 / (K0^T r);  r <- 1 / (K0 c)
    The result diag(r) K0 diag(c) is differentiable through all steps.
    """
    if k0.rows != k0.cols:
        raise nc.ShapeError(f"sinkhorn: square matrix required, got {k0.shape}")
    if np.any(k0.data <= 0.0):
        bad = np.argwhere(k0.data <= 0.0)[0]
        raise NumericDomainError(
            f"sinkhorn: non-positive entry at index ({bad[0]}, {bad[1]})")
    n = k0.rows
    ones = Matrix.ones(n, 1)
    r = ones
    c = ones
    residuals = [_balance_residual(k0.data)]
    for j in range(n_iterations):
        c = nc.divide(ones, nc.matmul(nc.transpose(k0), r))
        r = nc.divide(ones, nc.matmul(k0, c))
        if not (np.all(np.isfinite(c.data)) and np.all(np.isfinite(r.data))):
            raise NumericDomainError(f"sinkhorn: overflow in scaling vectors at iteration {j + 1}")
        k_np = r.data * k0.data * c.data.T
        residuals.append(_balance_residual(k_np))
    k_t = nc.scale_rows(nc.scale_cols(k0, c), r)
    sigma2 = float(np.linalg.svd(k_t.data, compute_uv=False)[1]) if n > 1 else 0.0
    return k_t, SinkhornDiagnostics(residuals=np.array(residuals), sigma2=sigma2)


@dataclass
class DecayFit:
    """Least-squares slope of log residual vs iteration, with the spectral bound."""

    slope: float
    two_log_sigma2: float
    n_points: int
    sufficient: bool


def fit_decay_rate(diag: SinkhornDiagnostics, burn_in: int = 2,
                   min_points: int = 10) -> DecayFit:
    """Fit the empirical convergence exponent; compare against 2 ln(sigma2).

    Residuals at or below the floor (1e-13) carry no signal and are
    dropped; if fewer than `min_points` usable residuals remain after the
    burn-in the result is flagged insufficient rather than raising.
    """
    res = diag.residuals
    idx = np.arange(len(res))
    keep = (idx >= burn_in) & (res > RESIDUAL_FLOOR)
    two_log = 2.0 * np.log(diag.sigma2) if diag.sigma2 > 0.0 else -np.inf
    if keep.sum() < min_points:
        return DecayFit(slope=float("nan"), two_log_sigma2=two_log,
                        n_points=int(keep.sum()), sufficient=False)
    slope = float(np.polyfit(idx[keep], np.log(res[keep]), 1)[0])
    return DecayFit(slope=slope, two_log_sigma2=two_log,
                    n_points=int(keep.sum()), sufficient=True)


@dataclass
class AlignmentSet:
    """Per-client alignment maps applied to latents before fusion.

    mode none: identity (no parameters).
    mode soft: one free (d_out x d) matrix per client.
    mode tied: a single shared (d_out x d) matrix.
    mode hard: per-client free matrices S_i; the effective map is
        sinkhorn(exp(S_i), n_iterations), square by construction.
    """

    mode: str
    n_clients: int
    d: int
    d_out: int
    matrices: list[np.ndarray] = field(default_factory=list)
    n_iterations: int = 5

    @staticmethod
    def create(mode: str, n_clients: int, d: int, d_out: int | None = None,
               seed: int = 0, n_iterations: int = 5) -> "AlignmentSet":
        if mode not in MODES:
            raise ValueError(f"unknown alignment mode {mode!r}")
        d_out = d if d_out is None else d_out
        if mode == "hard" and d_out != d:
            raise ContractError("hard alignment requires d_out == d (square doubly stochastic)")
        if mode == "none" and d_out != d:
            raise ContractError("mode none cannot change the latent dimension")
        mats: list[np.ndarray] = []

        def noisy_eye(i: int, scale_diag: float) -> np.ndarray:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(23, i)))
            return scale_diag * np.eye(d_out, d) + rng.uniform(-0.01, 0.01, size=(d_out, d))

        if mode == "soft":
            mats = [noisy_eye(i, 1.0) for i in range(n_clients)]
        elif mode == "tied":
            mats = [noisy_eye(0, 1.0)]
        elif mode == "hard":
            # exp(2) on the diagonal makes exp(S) identity-dominant at start
            mats = [noisy_eye(i, 2.0) for i in range(n_clients)]
        return AlignmentSet(mode=mode, n_clients=n_clients, d=d, d_out=d_out,
                            matrices=mats, n_iterations=n_iterations)

    def params(self) -> dict[str, np.ndarray]:
        if self.mode == "none":
            return {}
        if self.mode == "tied":
            return {"P": self.matrices[0]}
        key = "P" if self.mode == "soft" else "S"
        return {f"{key}{i}": m for i, m in enumerate(self.matrices)}

    def effective(self, i: int, w: dict[str, Matrix] | None = None) -> Matrix | None:
        """The map applied to client i's latents; None means identity."""
        if self.mode == "none":
            return None
        if w is None:
            w = {k: nc.as_const(v) for k, v in self.params().items()}
        if self.mode == "tied":
            return w["P"]
        if self.mode == "soft":
            return w[f"P{i}"]
        k_t, _ = sinkhorn(nc.exp(w[f"S{i}"]), self.n_iterations)
        return k_t

    def effective_all(self, w: dict[str, Matrix] | None = None) -> list[Matrix | None]:
        if self.mode == "none":
            return [None] * self.n_clients
        if w is None:
            w = {k: nc.as_const(v) for k, v in self.params().items()}
        return [self.effective(i, w) for i in range(self.n_clients)]


def apply_alignment(aset: AlignmentSet, latents: list[Matrix],
                    w: dict[str, Matrix] | None = None) -> Matrix:
    """Stack one sample's aligned latents: row i of the result is (P_i h_i)^T.

    `latents` holds one d x 1 column per client.
    """
    if len(latents) != aset.n_clients:
        raise nc.ShapeError(
            f"apply_alignment: {len(latents)} latents for {aset.n_clients} clients")
    maps = aset.effective_all(w)
    rows = []
    for i, (h, p) in enumerate(zip(latents, maps)):
        if h.shape != (aset.d, 1):
            raise nc.ShapeError(
                f"apply_alignment: client {i} latent shape {h.shape}, expected ({aset.d}, 1)")
        rows.append(nc.transpose(h if p is None else nc.matmul(p, h)))
    return nc.vstack(rows)


def apply_alignment_batch(aset: AlignmentSet, latents: list[Matrix],
                          w: dict[str, Matrix] | None = None) -> list[Matrix]:
    """Align per-client latent batches (m x d each) -> (m x d_out each)."""
    if len(latents) != aset.n_clients:
        raise nc.ShapeError(
            f"apply_alignment_batch: {len(latents)} latents for {aset.n_clients} clients")
    maps = aset.effective_all(w)
    out = []
    for i, (l_i, p) in enumerate(zip(latents, maps)):
        if l_i.cols != aset.d:
            raise nc.ShapeError(
                f"apply_alignment_batch: client {i} latent width {l_i.cols}, expected {aset.d}")
        out.append(l_i if p is None else nc.matmul(l_i, nc.transpose(p)))
    return out


def write_matrix_csv(arr: np.ndarray, path) -> None:
    """Plot-ready CSV: one row per matrix row, full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(arr):
            writer.writerow([repr(float(v)) for v in row])
