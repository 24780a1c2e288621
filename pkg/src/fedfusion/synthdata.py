"""Synthetic vertically partitioned classification data.

Each client observes a private view of every sample.  Labels are tied to a
planted consensus graph over clients.  With probability 1 - conflict a
sample is *consensus*: every client emits the label's class template at
full strength.  Otherwise the sample is *dissent*: the true template
lights up only a patch — a seed node plus its graph neighbors, seeded
uniformly per sample — while a rival set of equal size shows one shared
wrong-class template at the same strength and everyone else emits pure
noise.  The rival set is drawn off-patch, pairwise non-adjacent and (when
the graph allows) not adjacent to the patch, so on a dissent sample the
two templates tie exactly in client count, amplitude and direction: any
order-free pooling of the clients is blind between them by construction.
What separates truth from rivalry is graph coherence alone — the true
template always occupies a *connected neighborhood* while the rival
scatters — so classifiers that exploit the planted graph can resolve
dissent samples that no pooled reader can.  Observation noise grows with
the conflict level.  The `graph_informativeness` self-test measures the
resulting margin directly.

Missing (client, sample) pairs are removed at the requested rate (every
sample keeps at least one present client), and optional permutation
planting records a latent-coordinate shuffle per client for the alignment
stage to undo.
"""

from __future__ import annotations

import json
import os
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numcore as nc
from .alignment import AlignmentSet, write_matrix_csv
from .localmodels import FormatVersionError
from .numcore import ContractError, Matrix

DATASET_FORMAT_VERSION = 1

AMP_ON = 1.0          # template strength for active clients
NOISE_SCALE = 0.25    # observation noise at conflict 0; grows with conflict
TEMPLATE_SHARING = 1.0  # template weight on the class-shared component

GRAPH_KINDS = ("ring", "blocks", "erdos_renyi")
PERMUTATION_MODES = ("off", "random_per_client")
CLIENT_KINDS = ("fc", "gru", "mixed")


class TooFewSamplesError(ContractError):
    """Sample budget cannot cover the class count."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs; defaults give the standard planted benchmark."""

    n_clients: int = 12
    n_samples: int = 600
    n_classes: int = 3
    input_dim: int = 6
    seq_len: int = 12
    kinds: str = "fc"
    graph: str = "ring"
    er_prob: float = 0.35
    n_blocks: int = 3
    conflict: float = 0.6
    missing: float = 0.1
    permutations: str = "off"
    latent_dim: int = 16
    seed: int = 0

    def client_kind(self, i: int) -> str:
        if self.kinds == "mixed":
            return "fc" if i % 2 == 0 else "gru"
        return self.kinds

    def client_input_dim(self, i: int) -> int:
        """Width of one time step (gru) or of the whole feature row (fc)."""
        return self.input_dim if self.client_kind(i) == "fc" else 1


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    shards: list[np.ndarray]          # fc: (m, input_dim); gru: (m, seq_len, 1)
    labels: np.ndarray                # (m,) int
    present: np.ndarray               # (n_clients, m) bool
    true_graph: np.ndarray            # (n, n) binary, zero diagonal
    patch_seeds: np.ndarray           # (m,) patch seed; -1 on consensus samples
    true_perms: list[np.ndarray] | None  # latent shuffles when planted

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def n_samples(self) -> int:
        return self.labels.size


def _validate(spec: SyntheticSpec) -> None:
    if spec.n_clients < 2:
        raise ContractError("need at least 2 clients")
    if spec.n_classes < 2:
        raise ContractError("need at least 2 classes")
    if spec.n_samples < 10 * spec.n_classes:
        raise TooFewSamplesError(
            f"{spec.n_samples} samples < 10 x {spec.n_classes} classes")
    if spec.graph not in GRAPH_KINDS:
        raise ValueError(f"unknown graph kind {spec.graph!r}")
    if spec.permutations not in PERMUTATION_MODES:
        raise ValueError(f"unknown permutation mode {spec.permutations!r}")
    if spec.kinds not in CLIENT_KINDS:
        raise ValueError(f"unknown client kinds {spec.kinds!r}")
    if not 0.0 <= spec.conflict <= 1.0:
        raise ContractError(f"conflict level {spec.conflict} outside [0, 1]")
    if not 0.0 <= spec.missing < 1.0:
        raise ContractError(f"missing rate {spec.missing} outside [0, 1)")
    if spec.graph == "erdos_renyi" and not 0.0 < spec.er_prob <= 1.0:
        raise ContractError(f"edge probability {spec.er_prob} outside (0, 1]")
    if spec.graph == "blocks" and not 1 <= spec.n_blocks <= spec.n_clients:
        raise ContractError(f"block count {spec.n_blocks} outside [1, n_clients]")


def _stream(spec: SyntheticSpec, lane: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(53, lane)))


def planted_graph(spec: SyntheticSpec) -> np.ndarray:
    """Binary symmetric adjacency with zero diagonal."""
    _validate(spec)
    n = spec.n_clients
    a = np.zeros((n, n))
    if spec.graph == "ring":
        for i in range(n):
            a[i, (i + 1) % n] = 1.0
            a[(i + 1) % n, i] = 1.0
    elif spec.graph == "blocks":
        block = np.arange(n) * spec.n_blocks // n
        same = block[:, None] == block[None, :]
        a = same.astype(np.float64)
    else:
        rng = _stream(spec, 0)
        iu = np.triu_indices(n, k=1)
        edges = rng.random(iu[0].size) < spec.er_prob
        a[iu] = edges.astype(np.float64)
        a = a + a.T
    np.fill_diagonal(a, 0.0)
    return a


def patch_membership(graph: np.ndarray) -> np.ndarray:
    """Boolean (n, n) matrix: entry (i, s) is True when node i belongs to
    the patch seeded at s, i.e. i is s itself or one of its neighbors."""
    member = graph > 0
    return member | np.eye(graph.shape[0], dtype=bool)


def _templates(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-client class templates built from a class-wide pattern.

    At correlation 1 every client shows the same template per class, so
    the stacked node rows carry no client-identity signal: a pooling
    classifier sees only the multiset of activations, while which
    *contiguous neighborhood* is active stays detectable through the
    graph.  Lowering the constant blends in idiosyncratic patterns.
    """
    out = []
    shared_fc = rng.standard_normal((spec.n_classes, spec.input_dim))
    shared_gru = rng.standard_normal((spec.n_classes, spec.seq_len))
    w_shared = np.sqrt(TEMPLATE_SHARING)
    w_own = np.sqrt(1.0 - TEMPLATE_SHARING)
    for i in range(spec.n_clients):
        if spec.client_kind(i) == "fc":
            own = rng.standard_normal((spec.n_classes, spec.input_dim))
            out.append(w_shared * shared_fc + w_own * own)
        else:
            own = rng.standard_normal((spec.n_classes, spec.seq_len))
            out.append(w_shared * shared_gru + w_own * own)
    return out


def _scattered_set(rng: np.random.Generator, adj: np.ndarray,
                   patch: np.ndarray, k: int) -> np.ndarray:
    """Greedy draw of k off-patch nodes, pairwise non-adjacent and (while
    the graph allows) not adjacent to the patch; relaxes to merely
    off-patch when no better candidate remains."""
    n = patch.size
    chosen = np.zeros(n, dtype=bool)
    patch_adj = adj[:, patch].any(axis=1)
    for _ in range(k):
        off = ~patch & ~chosen
        clear = off & ~adj[:, chosen].any(axis=1)
        pool = clear & ~patch_adj
        if not pool.any():
            pool = clear
        if not pool.any():
            pool = off
        if not pool.any():
            break
        chosen[rng.choice(np.flatnonzero(pool))] = True
    return chosen


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw a dataset; identical spec (including seed) gives identical bits."""
    _validate(spec)
    n, m, c = spec.n_clients, spec.n_samples, spec.n_classes
    graph = planted_graph(spec)
    member = patch_membership(graph)
    # patch location is seeded uniformly per sample, so it carries no label
    # information — only patch *content* (the template) does
    patch_seeds = _stream(spec, 1).integers(0, n, size=m)

    labels = _stream(spec, 2).permutation(np.arange(m) % c)
    templates = _templates(spec, _stream(spec, 3))

    rng_conflict = _stream(spec, 4)
    rng_noise = _stream(spec, 5)
    dissent = rng_conflict.random(m) < spec.conflict
    wrong = (labels + rng_conflict.integers(1, c, size=m)) % c
    adj = graph > 0

    # consensus default: every client shows the true template at full
    # strength; dissent samples overwrite this below
    amp = np.full((n, m), AMP_ON)
    shown = np.tile(labels, (n, 1))
    for k in np.flatnonzero(dissent):
        patch = member[:, patch_seeds[k]]
        # the rival set ties the patch exactly in size, amplitude and
        # template direction, so pooled readers cannot split the two;
        # only the patch is connected on the planted graph
        rival = _scattered_set(rng_conflict, adj, patch, int(patch.sum()))
        amp[:, k] = np.where(patch | rival, AMP_ON, 0.0)
        shown[rival, k] = wrong[k]
    patch_seeds = np.where(dissent, patch_seeds, -1)

    noise_scale = NOISE_SCALE * (1.0 + spec.conflict)
    shards: list[np.ndarray] = []
    for i in range(n):
        t_i = templates[i]
        x = amp[i][:, None] * t_i[shown[i]]
        x = x + noise_scale * rng_noise.standard_normal(x.shape)
        if spec.client_kind(i) == "gru":
            x = x[:, :, None]
        shards.append(x)

    rng_missing = _stream(spec, 6)
    present = rng_missing.random((n, m)) >= spec.missing
    empty = ~present.any(axis=0)
    if empty.any():
        keep = rng_missing.integers(0, n, size=int(empty.sum()))
        present[keep, np.flatnonzero(empty)] = True
    for i in range(n):
        absent = ~present[i]
        if absent.any():
            shards[i][absent] = 0.0  # placeholder rows; the mask is authoritative

    perms = None
    if spec.permutations == "random_per_client":
        rng_perm = _stream(spec, 7)
        perms = [rng_perm.permutation(spec.latent_dim) for _ in range(n)]

    return SyntheticDataset(spec=spec, shards=shards, labels=labels,
                            present=present, true_graph=graph,
                            patch_seeds=patch_seeds, true_perms=perms)


# ---------------------------------------------------------------------------
# on-disk format


def save_dataset(ds: SyntheticDataset, path) -> None:
    meta = {"format_version": DATASET_FORMAT_VERSION, "spec": asdict(ds.spec)}
    arrays = {"labels": ds.labels, "present": ds.present,
              "true_graph": ds.true_graph, "patch_seeds": ds.patch_seeds}
    for i, shard in enumerate(ds.shards):
        arrays[f"shard_{i}"] = shard
    if ds.true_perms is not None:
        for i, p in enumerate(ds.true_perms):
            arrays[f"perm_{i}"] = p
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_dataset(path) -> SyntheticDataset:
    try:
        blob = np.load(path)
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        size = os.path.getsize(path) if os.path.exists(path) else 0
        raise FormatVersionError(
            f"unreadable dataset (truncated at byte {size}?): {exc}") from exc
    meta = json.loads(bytes(blob["__meta__"]).decode())
    if meta["format_version"] != DATASET_FORMAT_VERSION:
        raise FormatVersionError(
            f"dataset format {meta['format_version']} != {DATASET_FORMAT_VERSION}")
    spec = SyntheticSpec(**meta["spec"])
    shards = [np.array(blob[f"shard_{i}"]) for i in range(spec.n_clients)]
    perms = None
    if spec.permutations == "random_per_client":
        perms = [np.array(blob[f"perm_{i}"]) for i in range(spec.n_clients)]
    return SyntheticDataset(spec=spec, shards=shards,
                            labels=np.array(blob["labels"]),
                            present=np.array(blob["present"]),
                            true_graph=np.array(blob["true_graph"]),
                            patch_seeds=np.array(blob["patch_seeds"]),
                            true_perms=perms)


def export_csv(ds: SyntheticDataset, outdir) -> list[str]:
    """Debug views: per-sample table and the planted adjacency."""
    os.makedirs(outdir, exist_ok=True)
    table = os.path.join(outdir, "samples.csv")
    with open(table, "w") as fh:
        cols = ",".join(f"present_{i}" for i in range(ds.n_clients))
        fh.write(f"sample,label,patch_seed,{cols}\n")
        for k in range(ds.n_samples):
            flags = ",".join(str(int(v)) for v in ds.present[:, k])
            fh.write(f"{k},{ds.labels[k]},{ds.patch_seeds[k]},{flags}\n")
    graph = os.path.join(outdir, "true_graph.csv")
    write_matrix_csv(ds.true_graph, graph)
    return [table, graph]


# ---------------------------------------------------------------------------
# generator self-test: the planted graph must carry label signal


def graph_informativeness(spec: SyntheticSpec | None = None, n_seeds: int = 5,
                          steps: int = 300, lr: float = 0.02,
                          holdout: float = 0.2) -> dict:
    """Train a small graph classifier on raw client features with the true
    graph versus the identity graph; returns per-seed test F1 and the
    median advantage.  Requires fc clients (raw features become node rows).
    """
    from .federation import macro_f1
    from .globalmodel import f3_loss, global_forward_batch, make_global_model
    from .graphsampler import normalize_adjacency

    if spec is None:
        spec = SyntheticSpec()
    if spec.kinds != "fc":
        raise ContractError("self-test expects fc clients")
    f1_true: list[float] = []
    f1_identity: list[float] = []
    for s in range(n_seeds):
        ds = generate(replace(spec, seed=spec.seed + s))
        m = ds.n_samples
        n_test = int(round(holdout * m))
        test = np.zeros(m, dtype=bool)
        test[m - n_test:] = True  # labels are pre-shuffled, so a tail split is fair
        operators = {
            "true": normalize_adjacency(Matrix(ds.true_graph)).data,
            "identity": np.eye(spec.n_clients),
        }
        for name, op in operators.items():
            aset = AlignmentSet.create("none", spec.n_clients, spec.input_dim)
            gm = make_global_model("gcn", aset, spec.n_classes,
                                   fixed_adjacency=op, seed=spec.seed + s)
            train_bundle = _RawBundle(ds, ~test)
            masters = gm.params()
            opt = nc.Adam(masters, lr=lr)
            for _ in range(steps):
                tape = nc.Tape()
                w = {k: tape.param(v, k) for k, v in masters.items()}
                loss = f3_loss(gm, train_bundle, w=w)
                tape.backward(loss)
                opt.step(tape.gradients())
            test_bundle = _RawBundle(ds, test)
            probs = global_forward_batch(gm, test_bundle.latents,
                                         present=test_bundle.present)
            pred = np.argmax(probs.data, axis=1)
            score = macro_f1(ds.labels[test], pred, spec.n_classes)
            (f1_true if name == "true" else f1_identity).append(score)
    adv = float(np.median(np.array(f1_true) - np.array(f1_identity)))
    return {"f1_true": f1_true, "f1_identity": f1_identity, "advantage": adv}


class _RawBundle:
    """Raw features viewed as a latent bundle restricted to a sample mask."""

    def __init__(self, ds: SyntheticDataset, mask: np.ndarray):
        idx = np.flatnonzero(mask)
        self.latents = [Matrix(s[idx]) for s in ds.shards]
        self.labels = ds.labels[idx]
        self.present = ds.present[:, idx]
