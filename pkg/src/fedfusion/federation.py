"""One-round federated fusion pipeline.

Clients pre-train in isolation, ship their latent representations to the
server exactly once, and the server trains a fusion model on top (mean
pooling or a graph convolution over a learned or fixed client graph,
with optional alignment maps).  Baselines (majority vote, best local
model, feature concatenation) and the two multi-round variants that do
send gradients back to clients live here too, next to the transfer
accounting that makes the communication cost of each variant auditable.

Pre-training fans out over a thread pool when requested; every job is an
independent pure function of its client, so the parallel and sequential
paths produce identical results.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as _stats

from . import numcore as nc
from .numcore import ContractError, Matrix
from .localmodels import (LocalClient, PretrainConfig, Shard, bind_params,
                          make_client, permute_client, pretrain_local,
                          save_client)
from .alignment import AlignmentSet
from .graphsampler import GraphPosterior, normalize_adjacency, reference
from .globalmodel import (DegenerateSampleError, GlobalModel, export_heatmaps,
                          f3_loss, global_forward_batch, make_global_model,
                          predictive_probs, save_global)
from .synthdata import SyntheticDataset, SyntheticSpec, generate, load_dataset

TRAIN, VAL, TEST = 0, 1, 2

# Draws used to estimate the posterior-averaged predictive at evaluation.
EVAL_GRAPH_SAMPLES = 16

VARIANTS = (
    "B_majority",
    "D_best_model",
    "E_mean_pool",
    "G_concat",
    "H_no_align",
    "J_tied",
    "K_align",
    "L_vfl_graph_align",
    "M_vfl_scratch",
)

GRAPH_MODES = ("none", "given", "knn", "icdf", "gumbel")

# Which alignment family each variant trains (baselines carry none).
ALIGNMENT_BY_VARIANT = {
    "B_majority": "none",
    "D_best_model": "none",
    "E_mean_pool": "none",
    "G_concat": "none",
    "H_no_align": "none",
    "J_tied": "tied",
    "K_align": "soft",
    "L_vfl_graph_align": "soft",
    "M_vfl_scratch": "soft",
}

# Only these variants may send gradients back to clients.
VFL_VARIANTS = ("L_vfl_graph_align", "M_vfl_scratch")

METRICS_CSV_HEADER = ("variant,graph_mode,seed,f1,auc,epochs_run,"
                      "transfers_out,transfers_in,wall_clock_s")


class TransferLog:
    """Per-client counters of latent shipments and gradient returns."""

    def __init__(self, n_clients: int):
        self.outbound = np.zeros(n_clients, dtype=np.int64)
        self.inbound = np.zeros(n_clients, dtype=np.int64)

    def record_out(self, client_id: int, count: int = 1) -> None:
        self.outbound[client_id] += count

    def record_in(self, client_id: int, count: int = 1) -> None:
        self.inbound[client_id] += count


@dataclass
class RepresentationBundle:
    """Everything the server holds after the single sharing round.

    `latents[i]` is client i's m x d latent matrix with absent rows
    zeroed as placeholders; `present` stays the source of truth for
    which (client, sample) pairs exist.  `split` assigns each sample to
    train (0), validation (1), or test (2).
    """

    latents: list[Matrix]
    labels: np.ndarray
    present: np.ndarray
    split: np.ndarray

    @property
    def n_clients(self) -> int:
        return len(self.latents)

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, code: int) -> "RepresentationBundle":
        idx = np.flatnonzero(self.split == code)
        return RepresentationBundle(
            latents=[Matrix(l.data[idx]) for l in self.latents],
            labels=self.labels[idx],
            present=self.present[:, idx],
            split=np.full(idx.size, code, dtype=np.int64),
        )


@dataclass(frozen=True)
class VariantConfig:
    """Which system variant to run and how its graph is built."""

    variant: str = "K_align"
    graph_mode: str = "icdf"
    kappa: int = 10
    tau: float = 0.5
    reference: str = "standard_normal"
    graph_samples: int = 1
    hidden: int = 8
    skip: bool = True
    d_out: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.graph_mode not in GRAPH_MODES:
            raise ContractError(f"unknown graph mode {self.graph_mode!r}")
        if self.tau <= 0.0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.kappa < 1:
            raise ContractError(f"kappa must be >= 1, got {self.kappa}")

    def effective_graph_mode(self) -> str:
        if self.variant in ("B_majority", "D_best_model", "E_mean_pool",
                            "G_concat"):
            return "none"
        return self.graph_mode


@dataclass(frozen=True)
class TrainConfig:
    """Server-side training protocol shared by all trained variants."""

    max_epochs: int = 500
    patience: int = 50
    lr_candidates: tuple[float, ...] = (0.01, 0.001)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    local_lr: float | None = None  # VFL client rate; None = global rate
    threads: int = 1

    def __post_init__(self):
        if self.max_epochs < 0 or self.patience < 0:
            raise ContractError("epochs and patience must be non-negative")
        if not self.lr_candidates:
            raise ContractError("need at least one learning-rate candidate")


@dataclass
class MetricsReport:
    """One run's outcome; the CSV row carries the first nine fields."""

    variant: str
    graph_mode: str
    seed: int
    f1: float
    auc: float
    epochs_run: int
    transfers_out: int
    transfers_in: int
    wall_clock_s: float
    lr: float | None = None
    per_client_out: list[int] = field(default_factory=list)
    per_client_in: list[int] = field(default_factory=list)

    def csv_row(self) -> str:
        return (f"{self.variant},{self.graph_mode},{self.seed},"
                f"{self.f1!r},{self.auc!r},{self.epochs_run},"
                f"{self.transfers_out},{self.transfers_in},"
                f"{self.wall_clock_s!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def write_metrics_csv(reports: list[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")


def write_metrics_json(reports: list[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


# ---------------------------------------------------------------------------
# splits and metrics


def stratified_split(labels: np.ndarray, seed: int,
                     fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                     ) -> np.ndarray:
    """Per-class random assignment to train/val/test at the given fractions.

    Every class with at least three samples gets at least one sample in
    each split; smaller classes go to train (and test when two).
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0.0:
        raise ContractError(f"split fractions must sum to 1, got {fractions}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(43,)))
    split = np.empty(labels.shape[0], dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        k = idx.size
        if k == 1:
            n_tr, n_val = 1, 0
        elif k == 2:
            n_tr, n_val = 1, 0
        else:
            n_tr = max(1, int(round(fractions[0] * k)))
            n_val = max(1, int(round(fractions[1] * k)))
            while n_tr + n_val >= k:
                if n_tr > 1:
                    n_tr -= 1
                else:
                    n_val -= 1
        split[idx[:n_tr]] = TRAIN
        split[idx[n_tr:n_tr + n_val]] = VAL
        split[idx[n_tr + n_val:]] = TEST
    return split


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean over classes of 2 tp / (2 tp + fp + fn).

    A class with no true and no predicted samples contributes 0, matching
    the usual zero-division convention.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ContractError("macro_f1: shape mismatch between labels and "
                            f"predictions ({y_true.shape} vs {y_pred.shape})")
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def macro_auc(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Macro one-vs-rest AUC via the rank-statistic form.

    Ties in scores receive average ranks, which matches the trapezoidal
    ROC value.  Classes absent from `y_true` are left out of the mean.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != y_true.shape[0]:
        raise ContractError(f"macro_auc: scores must be (m, classes), got "
                            f"{scores.shape} for {y_true.shape[0]} labels")
    m, n_classes = scores.shape
    aucs = []
    for c in range(n_classes):
        pos = y_true == c
        n_pos = int(pos.sum())
        n_neg = m - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = _stats.rankdata(scores[:, c])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise ContractError("macro_auc: no class has both positives and "
                            "negatives")
    return float(np.mean(aucs))


# ---------------------------------------------------------------------------
# the single sharing round


def collect_bundle(clients: list[LocalClient], labels: np.ndarray,
                   split: np.ndarray, log: TransferLog | None = None,
                   ) -> RepresentationBundle:
    """One round of client -> server latent sharing.

    Each client evaluates its embedding on its own shard and ships the
    result once; absent rows are zeroed placeholders flagged by the
    `present` mask.
    """
    labels = np.asarray(labels)
    m = labels.shape[0]
    latents: list[Matrix] = []
    present = np.zeros((len(clients), m), dtype=bool)
    for i, cl in enumerate(clients):
        if cl.shard is None or cl.present is None:
            raise ContractError(f"client {cl.id} has no attached shard")
        h = cl.embedding.forward(cl.shard.values).data.copy()
        h[~cl.present] = 0.0
        latents.append(Matrix(h))
        present[i] = cl.present
        if log is not None:
            log.record_out(cl.id)
    return RepresentationBundle(latents=latents, labels=labels,
                                present=present, split=np.asarray(split))


def local_prediction_probs(clients: list[LocalClient]) -> list[np.ndarray]:
    """Each client's softmax head evaluated on its own shard (m x classes).

    Rows for absent samples are placeholders; callers must mask them.
    """
    out = []
    for cl in clients:
        h = cl.embedding.forward(cl.shard.values)
        out.append(cl.head_forward(h).data)
    return out


def _vote_counts(preds: np.ndarray, present: np.ndarray,
                 n_classes: int) -> np.ndarray:
    n, m = preds.shape
    counts = np.zeros((m, n_classes))
    for i in range(n):
        cols = np.flatnonzero(present[i])
        np.add.at(counts, (cols, preds[i, cols]), 1.0)
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if empty.size:
        raise DegenerateSampleError(f"sample {empty[0]} has no present client")
    return counts


def majority_vote(preds: np.ndarray, present: np.ndarray,
                  n_classes: int) -> np.ndarray:
    """Modal predicted class across present clients; ties -> lowest class."""
    counts = _vote_counts(preds, present, n_classes)
    return counts.argmax(axis=1)


def vote_fractions(preds: np.ndarray, present: np.ndarray,
                   n_classes: int) -> np.ndarray:
    """Per-sample class distribution of local votes (rows sum to 1)."""
    counts = _vote_counts(preds, present, n_classes)
    return counts / counts.sum(axis=1, keepdims=True)


def best_model_selection(preds: np.ndarray, present: np.ndarray,
                         labels: np.ndarray, val_mask: np.ndarray,
                         n_classes: int) -> int:
    """Client with the best validation macro-F1; ties -> lowest id.

    A client is scored on the validation samples it actually observes;
    one that observes none scores 0.
    """
    if not np.any(val_mask):
        raise ContractError("best_model_selection: empty validation split")
    scores = np.zeros(preds.shape[0])
    for i in range(preds.shape[0]):
        mask = val_mask & present[i]
        if np.any(mask):
            scores[i] = macro_f1(labels[mask], preds[i, mask], n_classes)
    return int(scores.argmax())


def entropy_diagnostic(preds: np.ndarray, present: np.ndarray,
                       n_classes: int) -> np.ndarray:
    """Shannon entropy (natural log) of local votes, one value per sample."""
    frac = vote_fractions(preds, present, n_classes)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(frac > 0.0, frac * np.log(frac), 0.0)
    return -terms.sum(axis=1)


def entropy_histogram(entropies: np.ndarray, n_classes: int,
                      bins: int = 20) -> np.ndarray:
    """Histogram rows (bin_left, bin_right, count) over [0, ln classes]."""
    edges = np.linspace(0.0, np.log(n_classes), bins + 1)
    hist, _ = np.histogram(entropies, bins=edges)
    return np.column_stack([edges[:-1], edges[1:], hist.astype(np.float64)])


def write_entropy_csv(rows: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,count\n")
        for left, right, count in rows:
            fh.write(f"{left!r},{right!r},{int(count)}\n")


# ---------------------------------------------------------------------------
# kappa-NN graph baseline


def knn_edges(latents: list[Matrix], kappa: int, seed: int = 0) -> np.ndarray:
    """Binary symmetric kappa-NN adjacency over clients.

    Each client's stacked latents are projected by a fixed random
    one-hidden-layer map; edges go to the kappa nearest neighbours under
    cosine similarity and are symmetrized by elementwise max.
    """
    n = len(latents)
    if kappa >= n:
        raise ContractError(f"kappa must be < n_clients, got kappa={kappa} "
                            f"for n={n}")
    feats_in = np.stack([l.data.reshape(-1) for l in latents])  # (n, m*d)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(61,)))
    hidden, proj = 64, 16
    w1 = rng.standard_normal((feats_in.shape[1], hidden))
    w1 /= np.sqrt(feats_in.shape[1])
    w2 = rng.standard_normal((hidden, proj)) / np.sqrt(hidden)
    feats = np.tanh(feats_in @ w1) @ w2
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    unit = feats / norms
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    a = np.zeros((n, n))
    for i in range(n):
        nbrs = np.argsort(-sim[i], kind="stable")[:kappa]
        a[i, nbrs] = 1.0
    return np.maximum(a, a.T)


def knn_graph(latents: list[Matrix], kappa: int, seed: int = 0) -> Matrix:
    """Normalized fixed operator from the kappa-NN adjacency."""
    return normalize_adjacency(nc.as_const(knn_edges(latents, kappa, seed)))


# ---------------------------------------------------------------------------
# generic early-stopping trainer


@dataclass
class FitResult:
    lr: float
    epochs_run: int
    best_val_loss: float
    train_history: list[float]
    val_history: list[float]


def fit_early_stopping(masters: dict[str, np.ndarray], train_loss_fn,
                       val_loss_fn, cfg: TrainConfig,
                       make_optimizers=None) -> FitResult:
    """Full-batch training with patience-based early stopping.

    For each candidate learning rate the parameters restart from their
    initial values, train until the validation loss stops improving for
    `patience` consecutive epochs (or `max_epochs`), and the best
    checkpoint is kept.  The candidate with the lowest best validation
    loss wins; its checkpoint is written back into `masters` in place.

    `train_loss_fn(w, epoch)` must build the loss on the tape that wraps
    `masters` as `w`; `val_loss_fn()` reads `masters` directly.
    """
    if make_optimizers is None:
        def make_optimizers(lr):
            return [nc.Adam(masters, lr=lr)]

    init = {k: v.copy() for k, v in masters.items()}
    best: tuple[float, dict, float, int, list, list] | None = None
    for lr in cfg.lr_candidates:
        for k, v in masters.items():
            v[...] = init[k]
        opts = make_optimizers(lr)
        best_val = val_loss_fn()
        best_params = {k: v.copy() for k, v in masters.items()}
        since_best = 0
        train_hist: list[float] = []
        val_hist: list[float] = []
        epochs = 0
        for epoch in range(cfg.max_epochs):
            tape = nc.Tape()
            w = bind_params(masters, tape)
            loss = train_loss_fn(w, epoch)
            tape.backward(loss)
            grads = tape.gradients()
            for opt in opts:
                opt.step({k: grads[k] for k in opt.params})
            vl = val_loss_fn()
            train_hist.append(loss.item())
            val_hist.append(vl)
            epochs = epoch + 1
            if vl < best_val:
                best_val = vl
                best_params = {k: v.copy() for k, v in masters.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        if best is None or best_val < best[0]:
            best = (best_val, best_params, lr, epochs, train_hist, val_hist)
    best_val, best_params, lr, epochs, train_hist, val_hist = best
    for k, v in masters.items():
        v[...] = best_params[k]
    return FitResult(lr=lr, epochs_run=epochs, best_val_loss=best_val,
                     train_history=train_hist, val_history=val_hist)


# ---------------------------------------------------------------------------
# trained variants


def build_global_model(cfg: VariantConfig, n_clients: int, latent_dim: int,
                       n_classes: int, seed: int,
                       fixed_adjacency: np.ndarray | None = None,
                       ) -> GlobalModel:
    """Assemble the fusion model a variant config describes."""
    mode = ALIGNMENT_BY_VARIANT[cfg.variant]
    aset = AlignmentSet.create(mode, n_clients, latent_dim, d_out=cfg.d_out,
                               seed=seed)
    graph_mode = cfg.effective_graph_mode()
    posterior = None
    fixed = None
    if graph_mode == "none":
        variant = "mean_pool"
    else:
        variant = "gcn"
        if graph_mode in ("icdf", "gumbel"):
            posterior = GraphPosterior(n=n_clients, tau=cfg.tau,
                                       ref=reference(cfg.reference),
                                       method=graph_mode, seed=seed)
        else:  # given / knn adjacency resolved by the caller
            if fixed_adjacency is None:
                raise ContractError(f"graph mode {graph_mode!r} needs a "
                                    "fixed adjacency")
            fixed = np.asarray(fixed_adjacency, dtype=np.float64)
    return make_global_model(variant, aset, n_classes, hidden=cfg.hidden,
                             skip=cfg.skip and variant == "gcn",
                             posterior=posterior, fixed_adjacency=fixed,
                             seed=seed)


def train_global(gm: GlobalModel, bundle: RepresentationBundle,
                 cfg: TrainConfig, graph_samples: int = 1) -> FitResult:
    """Fit the fusion model on the bundle's train split."""
    train_b = bundle.subset(TRAIN)
    val_b = bundle.subset(VAL)
    masters = gm.params()

    def train_loss(w, epoch):
        return f3_loss(gm, train_b, w=w, graph_samples=graph_samples,
                       step=epoch, sample_graph=True)

    def val_loss():
        return f3_loss(gm, val_b, sample_graph=False).item()

    return fit_early_stopping(masters, train_loss, val_loss, cfg)


def evaluate_global(gm: GlobalModel, bundle: RepresentationBundle,
                    code: int = TEST, graph_samples: int = EVAL_GRAPH_SAMPLES,
                    ) -> tuple[float, float, np.ndarray]:
    """Deterministic test-split metrics: (macro F1, macro AUC, probs).

    Models with an edge posterior are scored under the posterior-averaged
    predictive (fixed sample keys, so repeated runs are bit-identical);
    all other models take a single forward pass.
    """
    sub = bundle.subset(code)
    probs = predictive_probs(gm, sub.latents, present=sub.present,
                             graph_samples=graph_samples)
    preds = probs.argmax(axis=1)
    return (macro_f1(sub.labels, preds, gm.n_classes),
            macro_auc(sub.labels, probs), probs)


# --- feature-concatenation baseline ---


def concat_features(latents: list[Matrix], present: np.ndarray) -> np.ndarray:
    """Zero-imputed horizontal concatenation, (m, n*d)."""
    cols = []
    for i, l in enumerate(latents):
        h = l.data.copy()
        h[~present[i]] = 0.0
        cols.append(h)
    return np.hstack(cols)


def make_concat_params(n_clients: int, latent_dim: int, n_classes: int,
                       client_ids: list[int], seed: int,
                       ) -> dict[str, np.ndarray]:
    """Linear head on the concatenation; each client's weight block is
    seeded by its id, so re-ordering clients re-orders blocks verbatim."""
    fan_in = n_clients * latent_dim
    blocks = []
    for cid in client_ids:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(67, cid)))
        bound = 1.0 / np.sqrt(fan_in)
        blocks.append(rng.uniform(-bound, bound, size=(latent_dim, n_classes)))
    return {"Wcat": np.vstack(blocks), "bcat": np.zeros((1, n_classes))}


def concat_forward(x: np.ndarray, w: dict[str, Matrix]) -> Matrix:
    logits = nc.add_rowvec(nc.matmul(nc.as_const(x), w["Wcat"]), w["bcat"])
    return nc.softmax_rows(logits)


def train_concat(bundle: RepresentationBundle, n_classes: int, seed: int,
                 cfg: TrainConfig) -> tuple[dict[str, np.ndarray], FitResult]:
    train_b = bundle.subset(TRAIN)
    val_b = bundle.subset(VAL)
    x_tr = concat_features(train_b.latents, train_b.present)
    x_val = concat_features(val_b.latents, val_b.present)
    d = bundle.latents[0].shape[1]
    masters = make_concat_params(bundle.n_clients, d, n_classes,
                                 list(range(bundle.n_clients)), seed)

    def train_loss(w, epoch):
        return nc.cross_entropy(concat_forward(x_tr, w), train_b.labels)

    def val_loss():
        w = bind_params(masters, None)
        return nc.cross_entropy(concat_forward(x_val, w), val_b.labels).item()

    res = fit_early_stopping(masters, train_loss, val_loss, cfg)
    return masters, res


def evaluate_concat(masters: dict[str, np.ndarray],
                    bundle: RepresentationBundle, n_classes: int,
                    code: int = TEST) -> tuple[float, float, np.ndarray]:
    sub = bundle.subset(code)
    x = concat_features(sub.latents, sub.present)
    probs = concat_forward(x, bind_params(masters, None)).data
    preds = probs.argmax(axis=1)
    return (macro_f1(sub.labels, preds, n_classes),
            macro_auc(sub.labels, probs), probs)


# --- VFL variants (gradients flow to clients) ---


class _LiveBundle:
    """Loss-facing view over latents rebuilt on the current tape."""

    def __init__(self, latents, labels, present):
        self.latents = latents
        self.labels = labels
        self.present = present


def _client_key(i: int, name: str) -> str:
    return f"c{i}.{name}"


def train_vfl(gm: GlobalModel, clients: list[LocalClient],
              labels: np.ndarray, split: np.ndarray, cfg: TrainConfig,
              log: TransferLog, graph_samples: int = 1) -> FitResult:
    """Joint training of client embeddings and the fusion model.

    Every epoch the clients ship fresh latents (one outbound each) and
    receive embedding gradients (one inbound each); the transfer log
    records the multi-round cost.  Client softmax heads stay untouched —
    the fusion model is the system head.
    """
    labels = np.asarray(labels)
    tr = np.flatnonzero(split == TRAIN)
    va = np.flatnonzero(split == VAL)
    x_tr = [cl.shard.values[tr] for cl in clients]
    x_val = [cl.shard.values[va] for cl in clients]
    present_tr = np.stack([cl.present[tr] for cl in clients])
    present_val = np.stack([cl.present[va] for cl in clients])
    y_tr, y_val = labels[tr], labels[va]

    masters = gm.params()
    global_keys = list(masters.keys())
    emb_params = [cl.embedding.params() for cl in clients]
    for i, ps in enumerate(emb_params):
        for name, arr in ps.items():
            masters[_client_key(i, name)] = arr
    local_keys = [k for k in masters if k not in global_keys]

    def client_latents(w_or_none, xs):
        latents = []
        for i, cl in enumerate(clients):
            if w_or_none is None:
                w_i = bind_params(emb_params[i], None)
            else:
                prefix = _client_key(i, "")
                w_i = {k.removeprefix(prefix): v
                       for k, v in w_or_none.items() if k.startswith(prefix)}
            latents.append(cl.embedding.forward(xs[i], w_i))
        return latents

    def train_loss(w, epoch):
        for cl in clients:
            log.record_out(cl.id)
            log.record_in(cl.id)
        latents = client_latents(w, x_tr)
        live = _LiveBundle(latents, y_tr, present_tr)
        w_global = {k: w[k] for k in global_keys}
        return f3_loss(gm, live, w=w_global, graph_samples=graph_samples,
                       step=epoch, sample_graph=True)

    def val_loss():
        latents = client_latents(None, x_val)
        live = _LiveBundle(latents, y_val, present_val)
        return f3_loss(gm, live, sample_graph=False).item()

    def make_optimizers(lr):
        local_lr = cfg.local_lr if cfg.local_lr is not None else lr
        opts = [nc.Adam({k: masters[k] for k in global_keys}, lr=lr)]
        if local_keys:
            opts.append(nc.Adam({k: masters[k] for k in local_keys},
                                lr=local_lr))
        return opts

    return fit_early_stopping(masters, train_loss, val_loss, cfg,
                              make_optimizers=make_optimizers)


def evaluate_vfl(gm: GlobalModel, clients: list[LocalClient],
                 labels: np.ndarray, split: np.ndarray, log: TransferLog,
                 code: int = TEST) -> tuple[float, float, np.ndarray]:
    labels = np.asarray(labels)
    idx = np.flatnonzero(split == code)
    latents = []
    for cl in clients:
        log.record_out(cl.id)
        latents.append(cl.embedding.forward(cl.shard.values[idx]))
    present = np.stack([cl.present[idx] for cl in clients])
    probs = predictive_probs(gm, latents, present=present)
    preds = probs.argmax(axis=1)
    return (macro_f1(labels[idx], preds, gm.n_classes),
            macro_auc(labels[idx], probs), probs)


# ---------------------------------------------------------------------------
# the full pipeline


def build_clients(ds: SyntheticDataset, seed: int) -> list[LocalClient]:
    spec = ds.spec
    return [
        make_client(i, kind=spec.client_kind(i),
                    input_dim=spec.client_input_dim(i),
                    n_classes=spec.n_classes, latent_dim=spec.latent_dim,
                    seed=seed, shard=Shard(ds.shards[i]),
                    present=ds.present[i])
        for i in range(spec.n_clients)
    ]


def pretrain_clients(clients: list[LocalClient], labels: np.ndarray,
                     split: np.ndarray, cfg: PretrainConfig,
                     threads: int = 1) -> None:
    """Pre-train every client on its present *training* samples.

    Validation and test labels never reach the clients.  Jobs are
    independent, so the thread pool cannot change the result.
    """
    train_mask = np.asarray(split) == TRAIN

    def job(cl: LocalClient) -> None:
        full_present = cl.present
        cl.present = full_present & train_mask
        try:
            pretrain_local(cl, labels, cfg)
        finally:
            cl.present = full_present

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, clients))
    else:
        for cl in clients:
            job(cl)


def _resolve_dataset(dataset, seed: int) -> SyntheticDataset:
    if isinstance(dataset, SyntheticDataset):
        return dataset
    if isinstance(dataset, SyntheticSpec):
        return generate(replace(dataset, seed=seed))
    return load_dataset(dataset)


def _majority_class(labels: np.ndarray, mask: np.ndarray,
                    n_classes: int) -> int:
    counts = np.bincount(np.asarray(labels)[mask], minlength=n_classes)
    return int(counts.argmax())


def run_pipeline(dataset, variant: VariantConfig,
                 train: TrainConfig | None = None, seed: int = 0,
                 out_dir: str | None = None) -> MetricsReport:
    """Pre-train, share once, fuse, evaluate; returns the metrics report.

    `dataset` is a generation spec (regenerated with this run's seed), an
    already-built dataset, or a path to a saved one.  With `out_dir` the
    run also writes checkpoints, heatmap CSVs, the entropy histogram and
    its own metrics files.
    """
    t0 = time.perf_counter()
    if train is None:
        train = TrainConfig()
    ds = _resolve_dataset(dataset, seed)
    spec = ds.spec
    n, m, n_classes = spec.n_clients, spec.n_samples, spec.n_classes
    split = stratified_split(ds.labels, seed)
    log = TransferLog(n)
    clients = build_clients(ds, seed)
    graph_mode = variant.effective_graph_mode()
    if graph_mode == "knn" and variant.variant in VFL_VARIANTS:
        raise ContractError("knn graph is built from the one-round bundle; "
                            "VFL variants rebuild latents every epoch")

    if variant.variant != "M_vfl_scratch":
        pretrain_clients(clients, ds.labels, split, train.pretrain,
                         threads=train.threads)
        if ds.true_perms is not None:
            clients = [permute_client(cl, p)
                       for cl, p in zip(clients, ds.true_perms)]

    gm = None
    fit: FitResult | None = None
    if variant.variant in ("B_majority", "D_best_model"):
        probs = local_prediction_probs(clients)
        for cl in clients:
            log.record_out(cl.id)
        preds = np.stack([p.argmax(axis=1) for p in probs])
        present = np.stack([cl.present for cl in clients])
        test_mask = split == TEST
        if variant.variant == "B_majority":
            fused = majority_vote(preds[:, test_mask], present[:, test_mask],
                                  n_classes)
            scores = vote_fractions(preds[:, test_mask],
                                    present[:, test_mask], n_classes)
        else:
            chosen = best_model_selection(preds, present, ds.labels,
                                          split == VAL, n_classes)
            fallback = _majority_class(ds.labels, split == TRAIN, n_classes)
            fused = preds[chosen, test_mask].copy()
            scores = probs[chosen][test_mask].copy()
            absent = ~present[chosen, test_mask]
            fused[absent] = fallback
            scores[absent] = 1.0 / n_classes
        f1 = macro_f1(ds.labels[test_mask], fused, n_classes)
        auc = macro_auc(ds.labels[test_mask], scores)
        epochs_run, lr = 0, None
    elif variant.variant == "G_concat":
        bundle = collect_bundle(clients, ds.labels, split, log)
        masters, fit = train_concat(bundle, n_classes, seed, train)
        f1, auc, _ = evaluate_concat(masters, bundle, n_classes)
        epochs_run, lr = fit.epochs_run, fit.lr
    elif variant.variant in VFL_VARIANTS:
        fixed = None
        if graph_mode == "given":
            fixed = normalize_adjacency(nc.as_const(ds.true_graph)).data
        gm = build_global_model(variant, n, spec.latent_dim, n_classes, seed,
                                fixed_adjacency=fixed)
        fit = train_vfl(gm, clients, ds.labels, split, train, log,
                        graph_samples=variant.graph_samples)
        f1, auc, _ = evaluate_vfl(gm, clients, ds.labels, split, log)
        epochs_run, lr = fit.epochs_run, fit.lr
    else:  # E, H, J, K: one-round fusion
        bundle = collect_bundle(clients, ds.labels, split, log)
        fixed = None
        if graph_mode == "given":
            fixed = normalize_adjacency(nc.as_const(ds.true_graph)).data
        elif graph_mode == "knn":
            train_b = bundle.subset(TRAIN)
            fixed = knn_graph(train_b.latents, variant.kappa, seed).data
        gm = build_global_model(variant, n, spec.latent_dim, n_classes, seed,
                                fixed_adjacency=fixed)
        fit = train_global(gm, bundle, train,
                           graph_samples=variant.graph_samples)
        f1, auc, _ = evaluate_global(gm, bundle)
        epochs_run, lr = fit.epochs_run, fit.lr

    report = MetricsReport(
        variant=variant.variant, graph_mode=graph_mode, seed=seed,
        f1=f1, auc=auc, epochs_run=epochs_run,
        transfers_out=int(log.outbound.sum()),
        transfers_in=int(log.inbound.sum()),
        wall_clock_s=time.perf_counter() - t0, lr=lr,
        per_client_out=log.outbound.tolist(),
        per_client_in=log.inbound.tolist(),
    )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_json([report], os.path.join(out_dir, "metrics.json"))
        write_metrics_csv([report], os.path.join(out_dir, "metrics.csv"))
        if variant.variant != "M_vfl_scratch":
            probs = local_prediction_probs(clients)
            preds = np.stack([p.argmax(axis=1) for p in probs])
            present = np.stack([cl.present for cl in clients])
            ent = entropy_diagnostic(preds, present, n_classes)
            write_entropy_csv(entropy_histogram(ent, n_classes),
                              os.path.join(out_dir, "entropy.csv"))
        cdir = os.path.join(out_dir, "clients")
        os.makedirs(cdir, exist_ok=True)
        for cl in clients:
            save_client(cl, os.path.join(cdir, f"client_{cl.id}.npz"))
        if gm is not None:
            save_global(gm, os.path.join(out_dir, "global.npz"))
            export_heatmaps(gm, os.path.join(out_dir, "heatmaps"))
    return report
