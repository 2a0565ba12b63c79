import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphon_lqc import kernels as kc
from graphon_lqc.kernels import LabelField, LabelGrid, MatrixKernel


def direct_apply(blocks, f, h):
    n = blocks.shape[0]
    out = np.zeros((n, blocks.shape[2]))
    for i in range(n):
        for j in range(n):
            out[i] += h * blocks[i, j] @ f[j]
    return out


def direct_compose(a, mid, b, h):
    n = a.shape[0]
    out = np.zeros((n, n, a.shape[2], b.shape[3]))
    for i in range(n):
        for j in range(n):
            for w in range(n):
                out[i, j] += h * a[i, w] @ mid[w] @ b[w, j]
    return out


# --- apply_operator ---------------------------------------------------------

def test_apply_zero_kernel():
    g = LabelGrid(5)
    out = kc.apply_operator(kc.constant_graphon(g, 0.0), LabelField(g, np.arange(5.0)))
    assert np.all(out.values == 0)


def test_apply_constant_kernel_constant_field():
    g = LabelGrid(7)
    out = kc.apply_operator(kc.constant_graphon(g, 3.0), LabelField(g, np.full(7, 2.0)))
    assert np.allclose(out.values, 6.0, atol=1e-14)


def test_apply_two_label_example():
    g = LabelGrid(2)
    K = MatrixKernel(g, np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = kc.apply_operator(K, LabelField(g, np.ones(2)))
    assert np.allclose(out.values, [1.5, 3.5])


def test_apply_grid_mismatch():
    with pytest.raises(kc.GridMismatchError):
        kc.apply_operator(kc.constant_graphon(LabelGrid(3)), LabelField(LabelGrid(4), np.ones(4)))


def test_apply_matches_loops_matrix_valued():
    rng = np.random.default_rng(0)
    blocks = rng.normal(size=(5, 5, 2, 3))
    f = rng.normal(size=(5, 3))
    assert np.allclose(kc.apply(blocks, f, 0.2), direct_apply(blocks, f, 0.2))


# --- adjoint ----------------------------------------------------------------

def test_adjoint_scalar_transpose():
    g = LabelGrid(2)
    K = MatrixKernel(g, np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(kc.kernel_adjoint(K).blocks[..., 0, 0], [[1.0, 3.0], [2.0, 4.0]])


def test_adjoint_symmetric_kernel_fixed():
    K = kc.exp_graphon(LabelGrid(6), 0.5)
    assert np.array_equal(kc.kernel_adjoint(K).blocks, K.blocks)


def test_adjoint_involution_bit_exact():
    rng = np.random.default_rng(1)
    K = MatrixKernel(LabelGrid(6), rng.normal(size=(6, 6, 2, 2)))
    assert np.array_equal(kc.kernel_adjoint(kc.kernel_adjoint(K)).blocks, K.blocks)


def test_adjoint_is_l2_adjoint():
    rng = np.random.default_rng(2)
    b = rng.normal(size=(4, 4, 2, 2))
    f, g = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    h = 0.25
    lhs = h * np.sum(g * kc.apply(b, f, h))
    rhs = h * np.sum(kc.apply(kc.adjoint(b), g, h) * f)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# --- compositions -----------------------------------------------------------

def test_compose_constants():
    g = LabelGrid(9)
    out = kc.kernel_compose(kc.constant_graphon(g, 2.0), kc.constant_graphon(g, 5.0))
    assert np.allclose(out.blocks, 10.0)


def test_compose_two_label_example():
    g = LabelGrid(2)
    out = kc.kernel_compose(MatrixKernel(g, 2 * np.eye(2)), MatrixKernel(g, np.array([[1.0, 2.0], [3.0, 4.0]])))
    assert np.allclose(out.blocks[..., 0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_compose_matches_operator_product():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 5, 2, 2)), rng.normal(size=(5, 5, 2, 2))
    h = 0.2
    f = rng.normal(size=(5, 2))
    assert np.allclose(kc.apply(kc.compose(a, b, h), f, h), kc.apply(a, kc.apply(b, f, h), h))


def test_mult_compose_identity_and_zero():
    rng = np.random.default_rng(4)
    g = LabelGrid(4)
    K, W = MatrixKernel(g, rng.normal(size=(4, 4, 2, 2))), MatrixKernel(g, rng.normal(size=(4, 4, 2, 2)))
    eye = LabelField(g, np.broadcast_to(np.eye(2), (4, 2, 2)))
    assert np.allclose(kc.kernel_mult_compose(K, eye, W).blocks, kc.kernel_compose(K, W).blocks)
    zero = LabelField(g, np.zeros((4, 2, 2)))
    assert np.all(kc.kernel_mult_compose(K, zero, W).blocks == 0)


def test_mult_compose_two_label_example():
    g = LabelGrid(2)
    one = kc.constant_graphon(g, 1.0)
    out = kc.kernel_mult_compose(one, LabelField(g, np.array([2.0, 4.0])), one)
    assert np.allclose(out.blocks, 3.0)


def test_mult_compose_matches_loops():
    rng = np.random.default_rng(5)
    a, m, b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3, 2))
    assert np.allclose(kc.mult_compose(a, m, b, 1 / 3), direct_compose(a, m, b, 1 / 3))


# --- operator norm ----------------------------------------------------------

def test_norm_zero_and_constant():
    g = LabelGrid(5)
    assert kc.operator_norm(kc.constant_graphon(g, 0.0)).norm == 0.0
    assert kc.operator_norm(kc.constant_graphon(g, -2.5)).norm == pytest.approx(2.5, rel=1e-12)


def test_norm_matches_dense_svd():
    rng = np.random.default_rng(6)
    g = LabelGrid(8)
    K = MatrixKernel(g, rng.normal(size=(8, 8)))
    svd = np.linalg.svd(kc.to_matrix(K.blocks, g.weight), compute_uv=False)[0]
    res = kc.operator_norm(K)
    assert res.converged
    assert abs(res.norm - svd) <= 1e-10


def test_norm_not_converged_flag():
    rng = np.random.default_rng(7)
    blocks = rng.normal(size=(8, 8, 1, 1))
    res = kc.power_norm(blocks, 1 / 8, max_iter=1)
    assert not res.converged and res.iterations == 1 and res.norm > 0


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 6), d=st.integers(1, 2), data=st.data())
def test_norm_bounded_by_hilbert_schmidt(n, d, data):
    blocks = data.draw(arrays(np.float64, (n, n, d, d), elements=st.floats(-10, 10)))
    h = 1.0 / n
    res = kc.power_norm(blocks, h)
    assert res.norm <= kc.l2_norm(blocks, h) * (1 + 1e-12) + 1e-300


# --- wrappers and graphons --------------------------------------------------

def test_kernel_rejects_non_finite_and_false_symmetry():
    g = LabelGrid(2)
    with pytest.raises(ValueError):
        MatrixKernel(g, np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        MatrixKernel(g, np.array([[1.0, 2.0], [0.0, 1.0]]), symmetric=True)


def test_step_graphon_blocks():
    K = kc.step_graphon(LabelGrid(4), [[1.0, 0.3], [0.3, 1.0]])
    expected = np.array([[1, 1, .3, .3], [1, 1, .3, .3], [.3, .3, 1, 1], [.3, .3, 1, 1]])
    assert np.allclose(K.blocks[..., 0, 0], expected)
    assert K.symmetric


def test_make_graphon_forms(tmp_path):
    g = LabelGrid(3)
    assert np.allclose(kc.make_graphon(g, 2).blocks, 2.0)
    e = kc.make_graphon(g, {"name": "exp", "length": 1.0}).blocks[..., 0, 0]
    u = g.nodes
    assert np.allclose(e, np.exp(-np.abs(u[:, None] - u[None, :])))
    path = tmp_path / "k.csv"
    rows = ["i,j,value"] + [f"{i},{j},{i + j}" for i in range(3) for j in range(3)]
    path.write_text("\n".join(rows) + "\n")
    loaded = kc.make_graphon(g, {"csv": str(path)}).blocks[..., 0, 0]
    assert np.allclose(loaded, np.add.outer(np.arange(3), np.arange(3)))
    with pytest.raises(KeyError):
        kc.make_graphon(g, {"name": "nope"})


def test_csv_kernel_incomplete(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("0,0,1\n")
    with pytest.raises(ValueError):
        kc.load_kernel_csv(path, LabelGrid(2))
