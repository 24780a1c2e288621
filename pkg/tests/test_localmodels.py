import math

import numpy as np
import numpy.testing as npt
import pytest

import fedfusion.numcore as nc
from fedfusion.localmodels import (
    FcEmbedding,
    FormatVersionError,
    GruEmbedding,
    LocalClient,
    MissingDataError,
    PretrainConfig,
    Shard,
    load_client,
    local_forward,
    make_client,
    permute_fc,
    permute_gru,
    pretrain_local,
    save_client,
)
from fedfusion.numcore import ContractError


def _client_with_data(kind="fc", seed=0, m=20, input_dim=3, d=5, classes=2):
    rng = np.random.default_rng(seed + 100)
    if kind == "fc":
        values = rng.normal(size=(m, input_dim))
    else:
        values = rng.normal(size=(m, 4, input_dim))
    present = np.ones(m, dtype=bool)
    return make_client(0, kind, input_dim, classes, d, seed,
                       shard=Shard(values), present=present)


# ---------------------------------------------------------------------------
# forward passes


def test_fc_identity_embedding_passes_through():
    emb = FcEmbedding(U=np.eye(3), c=np.zeros((3, 1)))
    x = np.array([[0.5, 1.0, 2.0]])
    npt.assert_array_equal(emb.forward(x).data, x)


def test_zero_weight_head_gives_uniform_probs():
    client = _client_with_data()
    client.head_w = np.zeros_like(client.head_w)
    client.head_b = np.zeros_like(client.head_b)
    _, probs = local_forward(client, 3)
    npt.assert_allclose(probs.data, np.full((2, 1), 0.5), atol=1e-15)


def test_local_forward_shapes():
    client = _client_with_data(d=5, classes=2)
    h, probs = local_forward(client, 0)
    assert h.shape == (5, 1)
    assert probs.shape == (2, 1)
    npt.assert_allclose(probs.data.sum(), 1.0, atol=1e-12)


def test_local_forward_absent_sample_raises():
    client = _client_with_data()
    client.present[4] = False
    with pytest.raises(MissingDataError):
        local_forward(client, 4)


def _gru_scalar_oracle(emb: GruEmbedding, seq: np.ndarray) -> np.ndarray:
    """Step-by-step recomputation with plain Python scalars."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    d = emb.latent_dim
    h = [0.0] * d
    for t in range(seq.shape[0]):
        x = seq[t]
        z, r, n = [0.0] * d, [0.0] * d, [0.0] * d
        for i in range(d):
            az = emb.b_z[i, 0] + sum(emb.W_z[i, j] * x[j] for j in range(len(x)))
            ar = emb.b_r[i, 0] + sum(emb.W_r[i, j] * x[j] for j in range(len(x)))
            az += sum(emb.U_z[i, j] * h[j] for j in range(d))
            ar += sum(emb.U_r[i, j] * h[j] for j in range(d))
            z[i], r[i] = sig(az), sig(ar)
        for i in range(d):
            an = emb.b_n[i, 0] + sum(emb.W_n[i, j] * x[j] for j in range(len(x)))
            an += sum(emb.U_n[i, j] * r[j] * h[j] for j in range(d))
            n[i] = math.tanh(an)
        h = [(1.0 - z[i]) * h[i] + z[i] * n[i] for i in range(d)]
    return np.array(h)


def test_gru_forward_matches_scalar_loop():
    client = _client_with_data(kind="gru", seed=2, input_dim=2, d=4)
    seq = np.random.default_rng(5).normal(size=(3, 2))
    got = client.embedding.forward(seq[None, :, :]).data[0]
    want = _gru_scalar_oracle(client.embedding, seq)
    npt.assert_allclose(got, want, atol=1e-12)


def test_gru_forward_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    seq = rng.normal(size=(2, 3, 2))
    emb = _client_with_data(kind="gru", seed=9, input_dim=2, d=3).embedding
    names = list(emb.params())
    arrays = [emb.params()[k] for k in names]
    w_probe = rng.normal(size=(2, 3))

    def f(params):
        w = dict(zip(names, params))
        return nc.sum_all(nc.hadamard(nc.Matrix(w_probe), emb.forward(seq, w)))

    report = nc.grad_check(f, arrays, tol=1e-4)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# pre-training


def _train_accuracy(client: LocalClient, labels: np.ndarray) -> float:
    idx = np.flatnonzero(client.present)
    latents = client.embedding.forward(client.shard.values[idx])
    probs = client.head_forward(latents)
    return float(np.mean(probs.data.argmax(axis=1) == labels[idx]))


def test_pretrain_separable_toy_reaches_095():
    rng = np.random.default_rng(21)
    m = 40
    labels = np.repeat([0, 1], m // 2)
    centers = np.array([[1.0, 1.0], [-1.0, -1.0]])
    x = centers[labels] + 0.1 * rng.normal(size=(m, 2))
    # closed-form linear oracle: the midpoint rule separates these centers
    oracle = (x @ (centers[1] - centers[0]) > 0).astype(int)
    assert np.mean(oracle == labels) == 1.0
    client = make_client(0, "fc", 2, 2, 5, seed=1,
                         shard=Shard(x), present=np.ones(m, dtype=bool))
    pretrain_local(client, labels, PretrainConfig(epochs=200, lr=0.01))
    assert _train_accuracy(client, labels) >= 0.95
    assert client.frozen


def test_pretrain_zero_epochs_keeps_parameters_bit_identical():
    client = _client_with_data(seed=4)
    fresh = make_client(0, "fc", 3, 2, 5, 4)
    labels = np.random.default_rng(0).integers(0, 2, size=20)
    pretrain_local(client, labels, PretrainConfig(epochs=0))
    for key, val in client.params().items():
        npt.assert_array_equal(val, fresh.params()[key])


def test_pretrain_same_seed_bit_identical():
    labels = np.random.default_rng(1).integers(0, 2, size=20)

    def run():
        client = _client_with_data(seed=6)
        pretrain_local(client, labels, PretrainConfig(epochs=25))
        return client.params()

    a, b = run(), run()
    for key in a:
        npt.assert_array_equal(a[key], b[key])


def test_pretrain_single_class_warns_but_trains():
    client = _client_with_data(seed=7)
    labels = np.zeros(20, dtype=int)
    with pytest.warns(RuntimeWarning, match="single label"):
        history = pretrain_local(client, labels, PretrainConfig(epochs=10))
    assert len(history) == 10
    assert history[-1] < history[0]


def test_pretrain_reads_only_own_shard():
    labels = np.random.default_rng(2).integers(0, 2, size=20)
    mine = _client_with_data(seed=8)
    other = _client_with_data(seed=9)
    pretrain_local(mine, labels, PretrainConfig(epochs=5))
    assert mine.shard.reads > 0
    assert other.shard.reads == 0


def test_pretrain_loss_decreases_on_separable_data():
    rng = np.random.default_rng(31)
    labels = np.repeat([0, 1], 10)
    x = np.where(labels[:, None] == 0, 1.0, -1.0) + 0.05 * rng.normal(size=(20, 3))
    client = make_client(2, "fc", 3, 2, 4, seed=3,
                         shard=Shard(x), present=np.ones(20, dtype=bool))
    history = pretrain_local(client, labels, PretrainConfig(epochs=60))
    assert history[-1] < 0.5 * history[0]


# ---------------------------------------------------------------------------
# permutation transforms


def test_permute_fc_identity_unchanged():
    client = _client_with_data(seed=10)
    emb, (w, b) = permute_fc(client.embedding, (client.head_w, client.head_b),
                             np.arange(client.latent_dim))
    npt.assert_array_equal(emb.U, client.embedding.U)
    npt.assert_array_equal(emb.c, client.embedding.c)
    npt.assert_array_equal(w, client.head_w)
    npt.assert_array_equal(b, client.head_b)


def test_permute_fc_invalid_permutation_rejected():
    client = _client_with_data()
    with pytest.raises(ContractError):
        permute_fc(client.embedding, (client.head_w, client.head_b),
                   np.array([0, 0, 1, 2, 3]))


def test_permute_fc_latents_and_probs():
    rng = np.random.default_rng(12)
    client = _client_with_data(seed=12, d=6)
    p = rng.permutation(6)
    emb2, (w2, b2) = permute_fc(client.embedding, (client.head_w, client.head_b), p)
    x = rng.normal(size=(50, 3))
    h1 = client.embedding.forward(x).data
    h2 = emb2.forward(x).data
    npt.assert_array_equal(h2, h1[:, p])
    probs1 = nc.softmax_rows(nc.Matrix(h1 @ client.head_w.T + client.head_b.T)).data
    probs2 = nc.softmax_rows(nc.Matrix(h2 @ w2.T + b2.T)).data
    npt.assert_allclose(probs1, probs2, atol=1e-12)


def test_permute_gru_latents_and_probs():
    rng = np.random.default_rng(14)
    client = _client_with_data(kind="gru", seed=14, input_dim=2, d=5)
    p = rng.permutation(5)
    emb2, (w2, b2) = permute_gru(client.embedding, (client.head_w, client.head_b), p)
    seq = rng.normal(size=(4, 5, 2))
    h1 = client.embedding.forward(seq).data
    h2 = emb2.forward(seq).data
    npt.assert_allclose(h2, h1[:, p], atol=1e-10)
    probs1 = nc.softmax_rows(nc.Matrix(h1 @ client.head_w.T + client.head_b.T)).data
    probs2 = nc.softmax_rows(nc.Matrix(h2 @ w2.T + b2.T)).data
    npt.assert_allclose(probs1, probs2, atol=1e-12)


@pytest.mark.parametrize("kind", ["fc", "gru"])
def test_permutation_ambiguity_property(kind):
    rng = np.random.default_rng(40)
    d = 6
    client = _client_with_data(kind=kind, seed=41, input_dim=2, d=d)
    if kind == "fc":
        x = rng.normal(size=(10, 2))
    else:
        x = rng.normal(size=(10, 3, 2))
    base_h = client.embedding.forward(x).data
    base_probs = client.head_forward(nc.Matrix(base_h)).data
    for _ in range(20):
        p = rng.permutation(d)
        fn = permute_fc if kind == "fc" else permute_gru
        emb2, (w2, b2) = fn(client.embedding, (client.head_w, client.head_b), p)
        h2 = emb2.forward(x).data
        probs2 = nc.softmax_rows(nc.Matrix(h2 @ w2.T + b2.T)).data
        npt.assert_allclose(probs2, base_probs, atol=1e-10)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("kind", ["fc", "gru"])
def test_checkpoint_round_trip(kind, tmp_path):
    client = _client_with_data(kind=kind, seed=30, input_dim=2, d=4)
    path = tmp_path / "client.npz"
    save_client(client, path)
    back = load_client(path)
    assert back.id == client.id
    assert back.embedding.kind == kind
    for key, val in client.params().items():
        npt.assert_array_equal(back.params()[key], val)


def test_checkpoint_version_mismatch(tmp_path):
    client = _client_with_data(seed=33)
    path = tmp_path / "client.npz"
    save_client(client, path)
    blob = dict(np.load(path))
    import json

    meta = json.loads(bytes(blob["__meta__"]).decode())
    meta["format_version"] = 999
    blob["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **blob)
    with pytest.raises(FormatVersionError):
        load_client(path)


def test_checkpoint_truncated_file(tmp_path):
    client = _client_with_data(seed=34)
    path = tmp_path / "client.npz"
    save_client(client, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatVersionError, match="byte"):
        load_client(path)


def test_checksum_tracks_parameter_changes():
    client = _client_with_data(seed=35)
    before = client.param_checksum()
    assert before == client.param_checksum()
    labels = np.random.default_rng(3).integers(0, 2, size=20)
    pretrain_local(client, labels, PretrainConfig(epochs=2))
    assert client.param_checksum() != before
