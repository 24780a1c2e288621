import numpy as np
import numpy.testing as npt
import pytest

import fedfusion.numcore as nc
from fedfusion.numcore import (
    Adam,
    ContractError,
    Matrix,
    NumericDomainError,
    ShapeError,
    Tape,
    grad_check,
)


# ---------------------------------------------------------------------------
# value semantics


def test_matrix_requires_2d():
    with pytest.raises(ShapeError):
        Matrix([1.0, 2.0])


def test_matrix_rejects_nonfinite():
    with pytest.raises(NumericDomainError):
        Matrix([[np.nan, 1.0]])


def test_matrix_is_immutable():
    m = Matrix([[1.0, 2.0]])
    with pytest.raises(ValueError):
        m.data[0, 0] = 5.0


def test_matmul_identity_exact():
    rng = np.random.default_rng(0)
    a = rng.uniform(-2, 2, size=(3, 4))
    out = nc.matmul(Matrix.eye(3), Matrix(a))
    npt.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    out = nc.matmul(Matrix([[1.0, 2.0], [3.0, 4.0]]), Matrix([[1.0], [1.0]]))
    npt.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Matrix.zeros(2, 3), Matrix.zeros(2, 3))


def test_matmul_associativity():
    rng = np.random.default_rng(7)
    a, b, c = (Matrix(rng.uniform(-2, 2, size=(4, 4))) for _ in range(3))
    left = nc.matmul(nc.matmul(a, b), c)
    right = nc.matmul(a, nc.matmul(b, c))
    npt.assert_allclose(left.data, right.data, atol=1e-10)


def test_matmul_sum_gradient_closed_form():
    rng = np.random.default_rng(3)
    a = rng.uniform(-2, 2, size=(5, 4))
    b = rng.uniform(-2, 2, size=(4, 3))
    tape = Tape()
    wa = tape.param(a)
    loss = nc.sum_all(nc.matmul(wa, Matrix(b)))
    tape.backward(loss)
    npt.assert_allclose(tape.grad(wa), np.ones((5, 3)) @ b.T, rtol=1e-12)


def test_elementwise_trivials():
    npt.assert_array_equal(nc.relu(Matrix([[-1.0, 2.0]])).data, [[0.0, 2.0]])
    npt.assert_array_equal(nc.sigmoid(Matrix([[0.0]])).data, [[0.5]])
    npt.assert_array_equal(nc.tanh(Matrix([[0.0]])).data, [[0.0]])


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        nc.elementwise("abs", Matrix([[1.0]]))


def test_log_domain_error_names_index():
    with pytest.raises(NumericDomainError, match=r"\(1, 0\)"):
        nc.log(Matrix([[1.0, 2.0], [-1.0, 3.0]]))


def test_tanh_gradient_matches_central_differences():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, size=(3, 3))
    w = rng.uniform(-2, 2, size=(3, 3))

    def f(params):
        return nc.sum_all(nc.hadamard(Matrix(w), nc.tanh(params[0])))

    report = grad_check(f, [x], tol=1e-6)
    assert report.passed, str(report)


def test_softmax_trivials():
    npt.assert_allclose(nc.softmax_rows(Matrix([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = nc.softmax_rows(Matrix([[1000.0, 0.0]])).data
    assert big[0, 0] > 1.0 - 1e-12 and big[0, 1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    y = nc.softmax_rows(Matrix(rng.uniform(-2, 2, size=(6, 4)))).data
    npt.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
    assert np.all(y >= 0.0)


def test_softmax_row_permutation_equivariant_exact():
    rng = np.random.default_rng(9)
    x = rng.uniform(-2, 2, size=(5, 4))
    p = rng.permutation(5)
    npt.assert_array_equal(
        nc.softmax_rows(Matrix(x[p])).data, nc.softmax_rows(Matrix(x)).data[p]
    )


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(13)
    x = rng.uniform(-2, 2, size=(1, 5))
    for j in range(5):
        def f(params, j=j):
            y = nc.softmax_rows(params[0])
            pick = np.zeros((5, 1))
            pick[j, 0] = 1.0
            return nc.matmul(y, Matrix(pick))

        report = grad_check(f, [x], tol=1e-5)
        assert report.passed, f"component {j}: {report}"


def test_cross_entropy_one_hot_correct():
    pred = Matrix([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert nc.cross_entropy(pred, np.array([0, 2])).item() <= 1e-10


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 3, 5):
        pred = Matrix(np.full((4, c), 1.0 / c))
        npt.assert_allclose(
            nc.cross_entropy(pred, np.zeros(4, dtype=int)).item(), np.log(c), rtol=1e-12
        )


def test_cross_entropy_matches_scalar_loop():
    rng = np.random.default_rng(17)
    logits = rng.uniform(-2, 2, size=(8, 4))
    pred = nc.softmax_rows(Matrix(logits))
    labels = rng.integers(0, 4, size=8)
    expected = -np.mean([np.log(pred.data[k, labels[k]]) for k in range(8)])
    npt.assert_allclose(nc.cross_entropy(pred, labels).item(), expected, rtol=1e-12)


def test_cross_entropy_label_out_of_range():
    pred = Matrix(np.full((2, 3), 1.0 / 3.0))
    with pytest.raises(IndexError):
        nc.cross_entropy(pred, np.array([0, 3]))


def test_cross_entropy_rejects_nonstochastic_rows():
    with pytest.raises(ValueError):
        nc.cross_entropy(Matrix([[0.5, 0.9]]), np.array([0]))


# ---------------------------------------------------------------------------
# tape mechanics


def test_nonparticipating_leaf_gets_exact_zero_gradient():
    tape = Tape()
    used = tape.param(np.ones((2, 2)), name="used")
    unused = tape.param(np.ones((3, 1)), name="unused")
    tape.backward(nc.sum_all(nc.relu(used)))
    npt.assert_array_equal(tape.grad(unused), np.zeros((3, 1)))
    grads = tape.gradients()
    assert set(grads) == {"used", "unused"}
    npt.assert_array_equal(grads["unused"], np.zeros((3, 1)))


def test_gradient_accumulates_over_reuse():
    tape = Tape()
    x = tape.param(np.array([[2.0]]))
    tape.backward(nc.sum_all(nc.hadamard(x, x)))
    npt.assert_allclose(tape.grad(x), [[4.0]])


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.param(np.ones((2, 2)))
    b = t2.param(np.ones((2, 2)))
    with pytest.raises(ContractError):
        nc.add(a, b)


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        tape.backward(nc.relu(x))


def test_duplicate_param_name_rejected():
    tape = Tape()
    tape.param(np.ones((1, 1)), name="w")
    with pytest.raises(ContractError):
        tape.param(np.ones((1, 1)), name="w")


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_linear_near_machine_eps():
    w = np.array([[1.5, -2.0], [0.5, 3.0]])

    def f(params):
        return nc.sum_all(nc.hadamard(Matrix(w), params[0]))

    report = grad_check(f, [np.ones((2, 2))], tol=1e-9)
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_grad_check_constant_function_zero_gradient():
    def f(params):
        return nc.sum_all(nc.hadamard(params[0], Matrix.zeros(2, 2)))

    x = np.ones((2, 2))
    tape = Tape()
    w = tape.param(x)
    tape.backward(f([w]))
    npt.assert_array_equal(tape.grad(w), np.zeros((2, 2)))
    assert grad_check(f, [x], tol=1e-10).passed


def test_grad_check_detects_nondeterminism():
    state = {"n": 0}

    def f(params):
        state["n"] += 1
        return nc.sum_all(nc.scale(params[0], float(state["n"])))

    with pytest.raises(ContractError):
        grad_check(f, [np.ones((1, 1))])


# ---------------------------------------------------------------------------
# finite-difference sweep over every differentiable primitive, 100 seeds

# (name, number of params, builder(params, aux) -> Matrix, domain low/high)
def _unary(op):
    return lambda ps, aux: nc.elementwise(op, ps[0])


_CASES = [
    ("matmul", lambda ps, aux: nc.matmul(ps[0], ps[1]), [(3, 4), (4, 2)], (-2, 2)),
    ("transpose", lambda ps, aux: nc.transpose(ps[0]), [(3, 4)], (-2, 2)),
    ("add", lambda ps, aux: nc.add(ps[0], ps[1]), [(3, 3), (3, 3)], (-2, 2)),
    ("sub", lambda ps, aux: nc.sub(ps[0], ps[1]), [(3, 3), (3, 3)], (-2, 2)),
    ("hadamard", lambda ps, aux: nc.hadamard(ps[0], ps[1]), [(3, 3), (3, 3)], (-2, 2)),
    ("divide", lambda ps, aux: nc.divide(ps[0], ps[1]), [(3, 3), (3, 3)], (0.2, 2)),
    ("scale", lambda ps, aux: nc.scale(ps[0], -1.7), [(3, 3)], (-2, 2)),
    ("add_scalar", lambda ps, aux: nc.add_scalar(ps[0], 0.3), [(3, 3)], (-2, 2)),
    ("add_rowvec", lambda ps, aux: nc.add_rowvec(ps[0], ps[1]), [(3, 4), (1, 4)], (-2, 2)),
    ("add_colvec", lambda ps, aux: nc.add_colvec(ps[0], ps[1]), [(3, 4), (3, 1)], (-2, 2)),
    ("scale_rows", lambda ps, aux: nc.scale_rows(ps[0], ps[1]), [(3, 4), (3, 1)], (-2, 2)),
    ("scale_cols", lambda ps, aux: nc.scale_cols(ps[0], ps[1]), [(3, 4), (4, 1)], (-2, 2)),
    ("sigmoid", _unary("sigmoid"), [(3, 3)], (-2, 2)),
    ("tanh", _unary("tanh"), [(3, 3)], (-2, 2)),
    ("exp", _unary("exp"), [(3, 3)], (-2, 2)),
    ("log", _unary("log"), [(3, 3)], (0.1, 2)),
    ("rsqrt", lambda ps, aux: nc.rsqrt(ps[0]), [(3, 3)], (0.1, 2)),
    ("probit", lambda ps, aux: nc.probit(ps[0]), [(3, 3)], (0.05, 0.95)),
    ("softmax_rows", lambda ps, aux: nc.softmax_rows(ps[0]), [(3, 4)], (-2, 2)),
    ("sum_all", lambda ps, aux: ps[0], [(3, 4)], (-2, 2)),
    ("row_sums", lambda ps, aux: nc.row_sums(ps[0]), [(3, 4)], (-2, 2)),
    ("col_sums", lambda ps, aux: nc.col_sums(ps[0]), [(3, 4)], (-2, 2)),
    ("vstack", lambda ps, aux: nc.vstack(ps), [(2, 3), (3, 3)], (-2, 2)),
    ("interleave_rows", lambda ps, aux: nc.interleave_rows(ps), [(3, 2), (3, 2)], (-2, 2)),
    ("block_left_mul", lambda ps, aux: nc.block_left_mul(ps[0], ps[1], 3), [(3, 3), (6, 2)], (-2, 2)),
    ("block_mean_rows", lambda ps, aux: nc.block_mean_rows(ps[0], 3), [(6, 2)], (-2, 2)),
    ("sym_from_upper", lambda ps, aux: nc.sym_from_upper(ps[0], 4, 0.0), [(6, 1)], (-2, 2)),
    ("offdiag_from_vec", lambda ps, aux: nc.offdiag_from_vec(ps[0], 3, 1.0), [(6, 1)], (-2, 2)),
    ("with_unit_diag", lambda ps, aux: nc.with_unit_diag(ps[0]), [(3, 3)], (-2, 2)),
    ("cross_entropy", None, None, None),  # handled separately below
]


@pytest.mark.parametrize("name,builder,shapes,box", [c for c in _CASES if c[1] is not None],
                         ids=[c[0] for c in _CASES if c[1] is not None])
def test_primitive_gradients_match_finite_differences(name, builder, shapes, box):
    # relu is checked separately: its kink at 0 breaks central differences
    lo, hi = box
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = [rng.uniform(lo, hi, size=s) for s in shapes]
        out_shape = builder([Matrix(p) for p in params], None).shape
        w = rng.uniform(-2, 2, size=out_shape)

        def f(ps):
            return nc.sum_all(nc.hadamard(Matrix(w), builder(ps, None)))

        report = grad_check(f, params, tol=1e-4)
        assert report.passed, f"{name} seed {seed}: {report}"


def test_relu_gradient_matches_away_from_kink():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-2, 2, size=(3, 3))
        x[np.abs(x) < 1e-3] = 0.5  # keep the finite-difference step off the kink
        w = rng.uniform(-2, 2, size=(3, 3))

        def f(ps):
            return nc.sum_all(nc.hadamard(Matrix(w), nc.relu(ps[0])))

        assert grad_check(f, [x], tol=1e-4).passed, f"seed {seed}"


def test_cross_entropy_gradient_matches_finite_differences():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-2, 2, size=(4, 3))
        labels = rng.integers(0, 3, size=4)

        def f(ps):
            return nc.cross_entropy(nc.softmax_rows(ps[0]), labels)

        assert grad_check(f, [logits], tol=1e-4).passed, f"seed {seed}"


# ---------------------------------------------------------------------------
# optimizer


def test_adam_minimizes_quadratic():
    target = np.array([[1.0, -2.0], [0.5, 3.0]])
    w = np.zeros((2, 2))
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(500):
        tape = Tape()
        p = tape.param(w, name="w")
        diff = nc.sub(p, Matrix(target))
        tape.backward(nc.sum_all(nc.hadamard(diff, diff)))
        opt.step(tape.gradients())
    npt.assert_allclose(w, target, atol=1e-3)


def test_adam_is_deterministic():
    def run():
        w = np.full((2, 2), 0.3)
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(50):
            tape = Tape()
            p = tape.param(w, name="w")
            tape.backward(nc.sum_all(nc.hadamard(p, p)))
            opt.step(tape.gradients())
        return w

    npt.assert_array_equal(run(), run())
