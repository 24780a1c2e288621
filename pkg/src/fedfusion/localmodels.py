"""Client-side models: FC and GRU embeddings with a softmax head, isolated
pre-training on the client's own shard, and the parameter permutations that
realize the latent-dimension ambiguity across independently trained clients.
"""

from __future__ import annotations

import json
import warnings
import zipfile
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import numcore as nc
from .numcore import Adam, ContractError, Matrix, Tape

CLIENT_FORMAT_VERSION = 1


class MissingDataError(RuntimeError):
    """A sample was requested from a client that does not hold it."""


class FormatVersionError(RuntimeError):
    """A checkpoint or dataset file was written by an incompatible version."""


def bind_params(params: dict[str, np.ndarray], tape: Tape | None,
                prefix: str = "") -> dict[str, Matrix]:
    """Wrap raw parameter arrays for a forward pass.

    With a tape the arrays become tracked leaves named `prefix + key`;
    without one they are wrapped as constants (no recording, no copies).
    """
    if tape is None:
        return {k: nc.as_const(v) for k, v in params.items()}
    return {k: tape.param(v, prefix + k) for k, v in params.items()}


@dataclass
class FcEmbedding:
    """Single fully connected layer: h = relu(U x + c)."""

    U: np.ndarray  # (hidden, input)
    c: np.ndarray  # (hidden, 1)
    kind: ClassVar[str] = "fc"

    @property
    def latent_dim(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.U.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "c": self.c}

    def forward(self, x: np.ndarray, w: dict[str, Matrix] | None = None) -> Matrix:
        """Rows of `x` (m, input) -> latents (m, hidden)."""
        if w is None:
            w = bind_params(self.params(), None)
        X = nc.as_const(x)
        pre = nc.add_rowvec(nc.matmul(X, nc.transpose(w["U"])), nc.transpose(w["c"]))
        return nc.relu(pre)


@dataclass
class GruEmbedding:
    """GRU over a length-T sequence; the latent is the final hidden state.

    Gate recurrence:
        z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
        r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
        n_t = tanh(W_n x_t + U_n (r_t * h_{t-1}) + b_n)
        h_t = (1 - z_t) * h_{t-1} + z_t * n_t
    """

    W_z: np.ndarray
    W_r: np.ndarray
    W_n: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_n: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_n: np.ndarray
    kind: ClassVar[str] = "gru"

    @property
    def latent_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "W_z": self.W_z, "W_r": self.W_r, "W_n": self.W_n,
            "U_z": self.U_z, "U_r": self.U_r, "U_n": self.U_n,
            "b_z": self.b_z, "b_r": self.b_r, "b_n": self.b_n,
        }

    def forward(self, x: np.ndarray, w: dict[str, Matrix] | None = None) -> Matrix:
        """Sequences `x` (m, T, input) -> final hidden states (m, hidden)."""
        if x.ndim != 3:
            raise nc.ShapeError(f"gru forward: expected (m, T, input), got {x.shape}")
        if w is None:
            w = bind_params(self.params(), None)
        m, T, _ = x.shape
        h = Matrix.zeros(m, self.latent_dim)
        ones = Matrix.ones(m, self.latent_dim)
        for t in range(T):
            xt = nc.as_const(np.ascontiguousarray(x[:, t, :]))
            z = nc.sigmoid(self._gate(xt, h, w, "z"))
            r = nc.sigmoid(self._gate(xt, h, w, "r"))
            rh = nc.hadamard(r, h)
            n_pre = nc.add_rowvec(
                nc.add(nc.matmul(xt, nc.transpose(w["W_n"])),
                       nc.matmul(rh, nc.transpose(w["U_n"]))),
                nc.transpose(w["b_n"]),
            )
            n = nc.tanh(n_pre)
            h = nc.add(nc.hadamard(nc.sub(ones, z), h), nc.hadamard(z, n))
        return h

    @staticmethod
    def _gate(xt: Matrix, h: Matrix, w: dict[str, Matrix], g: str) -> Matrix:
        return nc.add_rowvec(
            nc.add(nc.matmul(xt, nc.transpose(w[f"W_{g}"])),
                   nc.matmul(h, nc.transpose(w[f"U_{g}"]))),
            nc.transpose(w[f"b_{g}"]),
        )


class Shard:
    """A client's private inputs behind an access counter.

    Tests use the counter to prove pre-training never touches another
    client's shard. Rows flagged absent hold zero placeholders; the
    `present` mask on the client is the only source of truth.
    """

    def __init__(self, values: np.ndarray):
        self._values = np.asarray(values, dtype=np.float64)
        self.reads = 0

    @property
    def values(self) -> np.ndarray:
        self.reads += 1
        return self._values

    @property
    def shape(self) -> tuple:
        return self._values.shape

    @property
    def n_samples(self) -> int:
        return self._values.shape[0]


@dataclass
class LocalClient:
    """One data owner: embedding phi_i, softmax head (W_i, b_i), private shard."""

    id: int
    embedding: FcEmbedding | GruEmbedding
    head_w: np.ndarray  # (classes, d)
    head_b: np.ndarray  # (classes, 1)
    shard: Shard | None
    present: np.ndarray | None  # bool mask over samples
    frozen: bool = False

    @property
    def latent_dim(self) -> int:
        return self.embedding.latent_dim

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {f"emb.{k}": v for k, v in self.embedding.params().items()}
        out["head.W"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def head_forward(self, latents: Matrix, w: dict[str, Matrix] | None = None) -> Matrix:
        if w is None:
            w = bind_params({"W": self.head_w, "b": self.head_b}, None)
            logits = nc.add_rowvec(nc.matmul(latents, nc.transpose(w["W"])),
                                   nc.transpose(w["b"]))
        else:
            logits = nc.add_rowvec(nc.matmul(latents, nc.transpose(w["head.W"])),
                                   nc.transpose(w["head.b"]))
        return nc.softmax_rows(logits)

    def param_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for key in sorted(self.params()):
            h.update(key.encode())
            h.update(self.params()[key].tobytes())
        return h.hexdigest()


def local_forward(client: LocalClient, k: int) -> tuple[Matrix, Matrix]:
    """Latent h (d x 1) and class probabilities (C x 1) for one sample."""
    if client.present is None or client.shard is None:
        raise MissingDataError(f"client {client.id} has no attached shard")
    if not client.present[k]:
        raise MissingDataError(f"sample {k} absent at client {client.id}")
    x = client.shard.values[k : k + 1]
    latents = client.embedding.forward(x)
    probs = client.head_forward(latents)
    return nc.transpose(latents), nc.transpose(probs)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def make_fc_embedding(input_dim: int, latent_dim: int, rng: np.random.Generator) -> FcEmbedding:
    return FcEmbedding(
        U=_uniform_init(rng, (latent_dim, input_dim), input_dim),
        c=_uniform_init(rng, (latent_dim, 1), input_dim),
    )


def make_gru_embedding(input_dim: int, latent_dim: int, rng: np.random.Generator) -> GruEmbedding:
    w = {g: _uniform_init(rng, (latent_dim, input_dim), input_dim) for g in "zrn"}
    u = {g: _uniform_init(rng, (latent_dim, latent_dim), latent_dim) for g in "zrn"}
    b = {g: _uniform_init(rng, (latent_dim, 1), latent_dim) for g in "zrn"}
    return GruEmbedding(
        W_z=w["z"], W_r=w["r"], W_n=w["n"],
        U_z=u["z"], U_r=u["r"], U_n=u["n"],
        b_z=b["z"], b_r=b["r"], b_n=b["n"],
    )


def make_client(client_id: int, kind: str, input_dim: int, n_classes: int,
                latent_dim: int, seed: int,
                shard: Shard | None = None,
                present: np.ndarray | None = None) -> LocalClient:
    """Build a freshly initialized client; init stream is keyed by (seed, id)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(17, client_id)))
    if kind == "fc":
        emb: FcEmbedding | GruEmbedding = make_fc_embedding(input_dim, latent_dim, rng)
    elif kind == "gru":
        emb = make_gru_embedding(input_dim, latent_dim, rng)
    else:
        raise ValueError(f"unknown embedding kind {kind!r}")
    head_w = _uniform_init(rng, (n_classes, latent_dim), latent_dim)
    head_b = _uniform_init(rng, (n_classes, 1), latent_dim)
    return LocalClient(id=client_id, embedding=emb, head_w=head_w, head_b=head_b,
                       shard=shard, present=present)


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 0.01


def pretrain_local(client: LocalClient, labels: np.ndarray,
                   cfg: PretrainConfig | None = None) -> list[float]:
    """Full-batch Adam on the client's present samples; freezes the client.

    Returns the per-epoch loss history. A shard whose present samples all
    carry one label raises a warning and still trains (constant head).
    """
    if cfg is None:
        cfg = PretrainConfig()
    if client.shard is None or client.present is None:
        raise MissingDataError(f"client {client.id} has no attached shard")
    idx = np.flatnonzero(client.present)
    x = client.shard.values[idx]
    y = np.asarray(labels)[idx]
    if np.unique(y).size < 2:
        warnings.warn(f"client {client.id}: degenerate shard with a single label",
                      RuntimeWarning)
    masters = client.params()
    opt = Adam(masters, lr=cfg.lr)
    history: list[float] = []
    for _ in range(cfg.epochs):
        tape = Tape()
        w = bind_params(masters, tape)
        latents = client.embedding.forward(
            x, {k.removeprefix("emb."): v for k, v in w.items() if k.startswith("emb.")})
        probs = client.head_forward(latents, w)
        loss = nc.cross_entropy(probs, y)
        tape.backward(loss)
        opt.step(tape.gradients())
        history.append(loss.item())
    client.frozen = True
    return history


def _check_permutation(p: np.ndarray, d: int) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != (d,) or not np.array_equal(np.sort(p), np.arange(d)):
        raise ContractError(f"not a valid permutation of 0..{d - 1}: {p!r}")
    return p


def permute_fc(emb: FcEmbedding, head: tuple[np.ndarray, np.ndarray],
               p: np.ndarray) -> tuple[FcEmbedding, tuple[np.ndarray, np.ndarray]]:
    """Reorder latent coordinates by p; the composed classifier is unchanged."""
    p = _check_permutation(p, emb.latent_dim)
    w, b = head
    new_emb = FcEmbedding(U=emb.U[p, :].copy(), c=emb.c[p].copy())
    return new_emb, (w[:, p].copy(), b.copy())


def permute_gru(emb: GruEmbedding, head: tuple[np.ndarray, np.ndarray],
                p: np.ndarray) -> tuple[GruEmbedding, tuple[np.ndarray, np.ndarray]]:
    """Reorder GRU hidden coordinates by p: W_*[p,:], U_*[p,p], b_*[p]."""
    p = _check_permutation(p, emb.latent_dim)
    w, b = head
    ix = np.ix_(p, p)
    new_emb = GruEmbedding(
        W_z=emb.W_z[p, :].copy(), W_r=emb.W_r[p, :].copy(), W_n=emb.W_n[p, :].copy(),
        U_z=emb.U_z[ix].copy(), U_r=emb.U_r[ix].copy(), U_n=emb.U_n[ix].copy(),
        b_z=emb.b_z[p].copy(), b_r=emb.b_r[p].copy(), b_n=emb.b_n[p].copy(),
    )
    return new_emb, (w[:, p].copy(), b.copy())


def permute_client(client: LocalClient, p: np.ndarray) -> LocalClient:
    """Client with latent coordinates permuted by p; outputs are preserved."""
    head = (client.head_w, client.head_b)
    if client.embedding.kind == "fc":
        emb, (w, b) = permute_fc(client.embedding, head, p)
    else:
        emb, (w, b) = permute_gru(client.embedding, head, p)
    return LocalClient(id=client.id, embedding=emb, head_w=w, head_b=b,
                       shard=client.shard, present=client.present,
                       frozen=client.frozen)


# ---------------------------------------------------------------------------
# checkpoint format: npz with a JSON metadata entry


def save_client(client: LocalClient, path) -> None:
    meta = {
        "format_version": CLIENT_FORMAT_VERSION,
        "id": client.id,
        "kind": client.embedding.kind,
        "latent_dim": client.latent_dim,
        "n_classes": client.n_classes,
    }
    arrays = dict(client.params())
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_client(path) -> LocalClient:
    """Rebuild a client from a checkpoint (shard is not stored)."""
    try:
        blob = np.load(path)
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        import os

        size = os.path.getsize(path) if os.path.exists(path) else 0
        raise FormatVersionError(
            f"unreadable checkpoint (truncated at byte {size}?): {exc}") from exc
    meta = json.loads(bytes(blob["__meta__"]).decode())
    if meta["format_version"] != CLIENT_FORMAT_VERSION:
        raise FormatVersionError(
            f"checkpoint format {meta['format_version']} != {CLIENT_FORMAT_VERSION}")
    if meta["kind"] == "fc":
        emb: FcEmbedding | GruEmbedding = FcEmbedding(U=blob["emb.U"], c=blob["emb.c"])
    else:
        emb = GruEmbedding(**{k: blob[f"emb.{k}"] for k in
                              ("W_z", "W_r", "W_n", "U_z", "U_r", "U_n",
                               "b_z", "b_r", "b_n")})
    return LocalClient(id=int(meta["id"]), embedding=emb,
                       head_w=blob["head.W"], head_b=blob["head.b"],
                       shard=None, present=None, frozen=True)
