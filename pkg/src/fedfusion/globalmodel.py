"""Server-side fusion models over client latents.

Two variants share one interface: a graph-agnostic two-layer network with
mean pooling across clients, and a two-layer graph convolution over the
consensus graph (learned edge posterior or a fixed operator), with
per-client alignment maps applied to the latents before fusion.  The
training loss is mean cross-entropy of the fused prediction, averaged over
independent graph samples when edges are stochastic.
"""

from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .alignment import AlignmentSet, apply_alignment_batch, write_matrix_csv
from .graphsampler import GraphPosterior, reference
from .localmodels import FormatVersionError
from .numcore import ContractError, Matrix

GLOBAL_FORMAT_VERSION = 1
DEFAULT_HIDDEN = 8

VARIANTS = ("mean_pool", "gcn")


class DegenerateSampleError(ContractError):
    """A sample has no present client at all, leaving nothing to fuse."""


@dataclass
class GlobalModel:
    """Fusion network parameters plus the alignment/graph attachments.

    Weight orientation is row-convention throughout: latents arrive as
    m x d batches, so W0 maps the node-feature width to hidden on the
    right and W1 maps hidden -> classes.  Biases exist only in the
    mean_pool variant; the gcn variant follows the bias-free
    graph-convolution form, optionally with a learned skip map added to
    the hidden layer.  Because its convolution weights carry no bias, the
    gcn variant appends a constant ones channel to the aligned latents:
    without an affine reference a relu over bias-free mixtures is
    scale-equivariant and cannot threshold activation strength, which is
    exactly the signal graph smoothing creates.  W0 and Wskip therefore
    have d_out + 1 rows in the gcn variant.
    """

    variant: str
    alignment: AlignmentSet
    w0: np.ndarray                              # (d_out, hidden)
    w1: np.ndarray                              # (hidden, classes)
    b0: np.ndarray | None = None                # (1, hidden), mean_pool only
    b1: np.ndarray | None = None                # (1, classes), mean_pool only
    posterior: GraphPosterior | None = None     # gcn with learned edges
    fixed_adjacency: np.ndarray | None = None   # gcn with a given (already
    skip: bool = False                          #  normalized) operator
    w_skip: np.ndarray | None = None            # (d_out, hidden) when skip

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown global variant {self.variant!r}")
        d_in, hidden = self.w0.shape
        expected = self.alignment.d_out + (1 if self.variant == "gcn" else 0)
        if d_in != expected:
            raise nc.ShapeError(
                f"W0 expects node-feature width {expected} "
                f"(alignment width {self.alignment.d_out}"
                f"{' plus the ones channel' if self.variant == 'gcn' else ''}), "
                f"got {d_in}")
        if self.w1.shape[0] != hidden:
            raise nc.ShapeError(
                f"W1 rows {self.w1.shape[0]} != hidden width {hidden}")
        if self.variant == "mean_pool":
            if self.b0 is None or self.b1 is None:
                raise ContractError("mean_pool requires both bias vectors")
            if self.posterior is not None or self.fixed_adjacency is not None:
                raise ContractError("mean_pool takes no graph")
            if self.skip:
                raise ContractError("skip connection applies to the gcn variant only")
        else:
            if self.b0 is not None or self.b1 is not None:
                raise ContractError("gcn variant is bias-free")
            if self.posterior is None and self.fixed_adjacency is None:
                raise ContractError("gcn needs an edge posterior or a fixed operator")
            if self.posterior is not None and self.posterior.n != self.alignment.n_clients:
                raise ContractError(
                    f"posterior over {self.posterior.n} nodes, {self.alignment.n_clients} clients")
        if self.skip:
            if self.w_skip is None or self.w_skip.shape != self.w0.shape:
                raise ContractError("skip requires w_skip with the shape of W0")

    @property
    def n_classes(self) -> int:
        return self.w1.shape[1]

    @property
    def n_clients(self) -> int:
        return self.alignment.n_clients

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays, including alignment and edge logits."""
        out = {"W0": self.w0, "W1": self.w1}
        if self.variant == "mean_pool":
            out["b0"] = self.b0
            out["b1"] = self.b1
        if self.skip:
            out["Wskip"] = self.w_skip
        out.update(self.alignment.params())
        if self.posterior is not None:
            out.update(self.posterior.params())
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Write updated arrays back after an optimizer step."""
        self.w0 = np.array(values["W0"])
        self.w1 = np.array(values["W1"])
        if self.variant == "mean_pool":
            self.b0 = np.array(values["b0"])
            self.b1 = np.array(values["b1"])
        if self.skip:
            self.w_skip = np.array(values["Wskip"])
        for key, arr in self.alignment.params().items():
            arr[...] = values[key]
        if self.posterior is not None:
            self.posterior.free_logits[...] = values["logits"]


def make_global_model(variant: str, alignment: AlignmentSet, n_classes: int,
                      hidden: int = DEFAULT_HIDDEN, skip: bool = False,
                      posterior: GraphPosterior | None = None,
                      fixed_adjacency: np.ndarray | None = None,
                      seed: int = 0) -> GlobalModel:
    """Uniform +-1/sqrt(fan_in) initialization, seeded."""
    d_out = alignment.d_out
    d_in = d_out + (1 if variant == "gcn" else 0)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(37,)))

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w0 = uni(d_in, (d_in, hidden))
    w1 = uni(hidden, (hidden, n_classes))
    b0 = b1 = None
    if variant == "mean_pool":
        b0 = uni(d_out, (1, hidden))
        b1 = uni(hidden, (1, n_classes))
    w_skip = uni(d_in, (d_in, hidden)) if skip else None
    return GlobalModel(variant=variant, alignment=alignment, w0=w0, w1=w1,
                       b0=b0, b1=b1, posterior=posterior,
                       fixed_adjacency=fixed_adjacency, skip=skip, w_skip=w_skip)


def _lookup(w: dict[str, Matrix] | None, key: str, stored: np.ndarray) -> Matrix:
    if w is not None and key in w:
        return w[key]
    return nc.as_const(stored)


def _stack_clients(gm: GlobalModel, latents, present, w) -> Matrix:
    """Mask absent rows to zero, align, and interleave into (m*n) x width.

    Row k*n + i of the result is sample k's aligned latent from client i,
    i.e. the k-th stacked node-feature matrix H_k lives in rows
    [k*n, (k+1)*n).  For the gcn variant a ones channel is appended after
    alignment and masked together with the latents, so an absent client
    contributes an all-zero node row, intercept included.
    """
    n = gm.n_clients
    if len(latents) != n:
        raise nc.ShapeError(f"{len(latents)} latent blocks for {n} clients")
    mats = [l if isinstance(l, Matrix) else nc.as_const(np.asarray(l, dtype=np.float64))
            for l in latents]
    m = mats[0].rows
    for i, l in enumerate(mats):
        if l.rows != m:
            raise nc.ShapeError(f"client {i} batch has {l.rows} rows, expected {m}")
    masks = [None] * n
    if present is not None:
        present = np.asarray(present, dtype=bool)
        if present.shape != (n, m):
            raise nc.ShapeError(f"present mask shape {present.shape}, expected {(n, m)}")
        empty = ~present.any(axis=0)
        if empty.any():
            k = int(np.argmax(empty))
            raise DegenerateSampleError(f"sample {k} has no present client")
        for i in range(n):
            if not present[i].all():
                masks[i] = nc.as_const(present[i].astype(np.float64).reshape(m, 1))
                mats[i] = nc.scale_rows(mats[i], masks[i])
    aligned = apply_alignment_batch(gm.alignment, mats, w)
    if gm.variant == "gcn":
        aligned = [nc.append_ones_col(h) for h in aligned]
        aligned = [h if mask is None else nc.scale_rows(h, mask)
                   for h, mask in zip(aligned, masks)]
    return nc.interleave_rows(aligned)


def _resolve_adjacency(gm: GlobalModel, w, a_hat, sample_step):
    if gm.variant == "mean_pool":
        return None
    if a_hat is not None:
        return a_hat
    if gm.posterior is not None:
        if sample_step is not None:
            return gm.posterior.sample_adjacency(sample_step, w)[0]
        return gm.posterior.expected_adjacency()
    return nc.as_const(gm.fixed_adjacency)


def global_forward_batch(gm: GlobalModel, latents, present=None,
                         w: dict[str, Matrix] | None = None,
                         a_hat: Matrix | None = None,
                         sample_step: int | None = None) -> Matrix:
    """Fused class probabilities for a batch: m x classes, rows sum to 1.

    `latents` holds one m x d matrix per client; `present` is an n x m
    mask and absent entries are imputed as zero rows.  For the gcn
    variant the operator is, in order of precedence: an explicit `a_hat`,
    a posterior sample at `sample_step`, the posterior mean, or the fixed
    stored operator.
    """
    x = _stack_clients(gm, latents, present, w)
    n = gm.n_clients
    w0 = _lookup(w, "W0", gm.w0)
    w1 = _lookup(w, "W1", gm.w1)
    if gm.variant == "mean_pool":
        h1 = nc.relu(nc.add_rowvec(nc.matmul(x, w0), _lookup(w, "b0", gm.b0)))
        pooled = nc.block_mean_rows(h1, n)
        logits = nc.add_rowvec(nc.matmul(pooled, w1), _lookup(w, "b1", gm.b1))
        return nc.softmax_rows(logits)
    a = _resolve_adjacency(gm, w, a_hat, sample_step)
    mid = nc.relu(nc.matmul(nc.block_left_mul(a, x, n), w0))
    if gm.skip:
        mid = nc.add(mid, nc.matmul(x, _lookup(w, "Wskip", gm.w_skip)))
    fused = nc.block_left_mul(a, mid, n)
    pooled = nc.block_mean_rows(fused, n)
    return nc.softmax_rows(nc.matmul(pooled, w1))


def global_forward(gm: GlobalModel, latents, w: dict[str, Matrix] | None = None,
                   a_hat: Matrix | None = None,
                   sample_step: int | None = None) -> Matrix:
    """Single-sample forward; `latents` lists one d x 1 column per client,
    with None marking a missing client."""
    n = gm.n_clients
    if len(latents) != n:
        raise nc.ShapeError(f"{len(latents)} latents for {n} clients")
    d = gm.alignment.d
    rows = []
    present = np.zeros((n, 1), dtype=bool)
    for i, h in enumerate(latents):
        if h is None:
            rows.append(nc.as_const(np.zeros((1, d))))
        else:
            if h.shape != (d, 1):
                raise nc.ShapeError(
                    f"client {i} latent shape {h.shape}, expected ({d}, 1)")
            rows.append(nc.transpose(h))
            present[i, 0] = True
    return global_forward_batch(gm, rows, present=present, w=w, a_hat=a_hat,
                                sample_step=sample_step)


EVAL_KEY_OFFSET = 1 << 32  # graph-sample keys disjoint from training steps


def predictive_probs(gm: GlobalModel, latents, present=None,
                     graph_samples: int = 16) -> np.ndarray:
    """Class probabilities under the model's predictive distribution.

    Training minimizes an expectation of the loss over sampled graphs, so
    the matched prediction rule is the expectation of the fused output
    over the same edge posterior, estimated with `graph_samples` draws at
    fixed keys disjoint from any training step.  Models without an edge
    posterior are deterministic and take a single forward pass.
    """
    if gm.variant != "gcn" or gm.posterior is None or graph_samples <= 1:
        return global_forward_batch(gm, latents, present=present).data
    total = None
    for s in range(graph_samples):
        p = global_forward_batch(gm, latents, present=present,
                                 sample_step=EVAL_KEY_OFFSET + s).data
        total = p if total is None else total + p
    return total / graph_samples


def f3_loss(gm: GlobalModel, bundle, w: dict[str, Matrix] | None = None,
            graph_samples: int = 1, step: int = 0,
            sample_graph: bool = True) -> Matrix:
    """Mean cross-entropy of the fused prediction over the bundle.

    When the gcn variant carries an edge posterior and `sample_graph` is
    set, the loss averages over `graph_samples` independent relaxed graph
    samples keyed by (step, sample index); otherwise a single
    deterministic forward is used (posterior mean or fixed operator).
    """
    labels = np.asarray(bundle.labels)
    if labels.size == 0:
        raise ContractError("f3_loss: empty bundle")
    present = getattr(bundle, "present", None)
    stochastic = (gm.variant == "gcn" and gm.posterior is not None and sample_graph)
    if not stochastic:
        probs = global_forward_batch(gm, bundle.latents, present=present, w=w)
        return nc.cross_entropy(probs, labels)
    if graph_samples < 1:
        raise ContractError(f"graph_samples must be >= 1, got {graph_samples}")
    total = None
    for s in range(graph_samples):
        a_hat = gm.posterior.sample_adjacency(step * graph_samples + s, w)[0]
        probs = global_forward_batch(gm, bundle.latents, present=present,
                                     w=w, a_hat=a_hat)
        loss_s = nc.cross_entropy(probs, labels)
        total = loss_s if total is None else nc.add(total, loss_s)
    return nc.scale(total, 1.0 / graph_samples)


# ---------------------------------------------------------------------------
# checkpointing and artifact export


def save_global(gm: GlobalModel, path) -> None:
    meta = {
        "format_version": GLOBAL_FORMAT_VERSION,
        "variant": gm.variant,
        "skip": gm.skip,
        "alignment": {
            "mode": gm.alignment.mode,
            "n_clients": gm.alignment.n_clients,
            "d": gm.alignment.d,
            "d_out": gm.alignment.d_out,
            "n_iterations": gm.alignment.n_iterations,
        },
        "posterior": None if gm.posterior is None else {
            "n": gm.posterior.n,
            "tau": gm.posterior.tau,
            "ref_kind": gm.posterior.ref.kind,
            "ref_sigma": gm.posterior.ref.sigma,
            "method": gm.posterior.method,
            "symmetric": gm.posterior.symmetric,
            "self_loop": gm.posterior.self_loop,
            "seed": gm.posterior.seed,
        },
    }
    arrays = dict(gm.params())
    if gm.fixed_adjacency is not None:
        arrays["fixed_adjacency"] = np.asarray(gm.fixed_adjacency)
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_global(path) -> GlobalModel:
    try:
        blob = np.load(path)
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        size = os.path.getsize(path) if os.path.exists(path) else 0
        raise FormatVersionError(
            f"unreadable checkpoint (truncated at byte {size}?): {exc}") from exc
    meta = json.loads(bytes(blob["__meta__"]).decode())
    if meta["format_version"] != GLOBAL_FORMAT_VERSION:
        raise FormatVersionError(
            f"checkpoint format {meta['format_version']} != {GLOBAL_FORMAT_VERSION}")
    am = meta["alignment"]
    aset = AlignmentSet(mode=am["mode"], n_clients=am["n_clients"], d=am["d"],
                        d_out=am["d_out"], n_iterations=am["n_iterations"])
    if aset.mode == "tied":
        aset.matrices = [np.array(blob["P"])]
    elif aset.mode == "soft":
        aset.matrices = [np.array(blob[f"P{i}"]) for i in range(am["n_clients"])]
    elif aset.mode == "hard":
        aset.matrices = [np.array(blob[f"S{i}"]) for i in range(am["n_clients"])]
    posterior = None
    if meta["posterior"] is not None:
        pm = meta["posterior"]
        posterior = GraphPosterior(
            n=pm["n"], tau=pm["tau"], ref=reference(pm["ref_kind"], pm["ref_sigma"]),
            method=pm["method"], symmetric=pm["symmetric"],
            self_loop=pm["self_loop"], seed=pm["seed"],
            free_logits=np.array(blob["logits"]))
    variant = meta["variant"]
    return GlobalModel(
        variant=variant, alignment=aset,
        w0=np.array(blob["W0"]), w1=np.array(blob["W1"]),
        b0=np.array(blob["b0"]) if variant == "mean_pool" else None,
        b1=np.array(blob["b1"]) if variant == "mean_pool" else None,
        posterior=posterior,
        fixed_adjacency=(np.array(blob["fixed_adjacency"])
                         if "fixed_adjacency" in blob.files else None),
        skip=meta["skip"],
        w_skip=np.array(blob["Wskip"]) if meta["skip"] else None)


def export_heatmaps(gm: GlobalModel, outdir) -> list[str]:
    """Plot-ready CSVs of the learned edge probabilities and alignment maps."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    if gm.posterior is not None:
        path = os.path.join(outdir, "theta.csv")
        write_matrix_csv(gm.posterior.theta_matrix(), path)
        written.append(path)
    elif gm.fixed_adjacency is not None:
        path = os.path.join(outdir, "adjacency.csv")
        write_matrix_csv(np.asarray(gm.fixed_adjacency), path)
        written.append(path)
    if gm.alignment.mode != "none":
        for i, eff in enumerate(gm.alignment.effective_all()):
            path = os.path.join(outdir, f"P{i}.csv")
            write_matrix_csv(eff.data, path)
            written.append(path)
    return written
