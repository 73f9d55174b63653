import numpy as np
import pytest

from cxrkit.linalg import jacobi_eigh, sqrtm_psd
from cxrkit.optim import Adam, AdamState, adam_step
from cxrkit.rng import Rng
from cxrkit.tensor import Tensor


def test_sqrtm_identity():
    s = sqrtm_psd(np.eye(4))
    np.testing.assert_array_equal(s, np.eye(4))


def test_sqrtm_diagonal():
    s = sqrtm_psd(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(s, np.diag([2.0, 3.0]), atol=1e-12)


def test_sqrtm_reconstruction_random_psd():
    rng = Rng(1, "test.sqrtm")
    a = rng.normal((5, 5), np.float64)
    m = a.T @ a
    s = sqrtm_psd(m)
    err = np.linalg.norm(s @ s - m) / (np.linalg.norm(m) + 1e-12)
    assert err < 1e-8
    np.testing.assert_allclose(s, s.T, atol=1e-12)
    assert jacobi_eigh(s)[0].min() > -1e-10


def test_sqrtm_tensor_roundtrip():
    t = Tensor(np.eye(3))
    out = sqrtm_psd(t)
    assert isinstance(out, Tensor)


def test_sqrtm_rejects_asymmetric_and_nonfinite():
    with pytest.raises(ValueError, match="symmetric"):
        sqrtm_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    bad = np.eye(2)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        sqrtm_psd(bad)
    with pytest.raises(ValueError, match="PSD"):
        sqrtm_psd(np.diag([1.0, -1.0]))


def test_jacobi_matches_numpy_eigh():
    rng = Rng(2, "test.jacobi")
    a = rng.normal((8, 8), np.float64)
    m = a + a.T
    w, v = jacobi_eigh(m)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(m), atol=1e-9)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, m, atol=1e-9)


def test_adam_zero_gradient_no_change():
    p = Tensor([1.0, 2.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    opt.step({"p": np.zeros(2, dtype=np.float32)})
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_closed_form():
    # with g=1, bias correction gives mhat=vhat=1, step = -lr/(1+eps)
    p = Tensor([0.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.ones(1, dtype=np.float32)})
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_converges_on_quadratic():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(100):
        g = 2.0 * (p.data - 3.0)
        opt.step({"p": g.astype(np.float32)})
    assert abs(p.data[0] - 3.0) < 0.1


def test_adam_skips_nonfinite_and_reports():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState({"p": p}, lr=0.1)
    skipped = adam_step(state, {"p": np.array([np.nan], dtype=np.float32)})
    assert skipped == ["p"]
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_shape_mismatch_raises():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState({"p": p})
    with pytest.raises(ValueError, match="shape"):
        adam_step(state, {"p": np.ones(2, dtype=np.float32)})


def test_adam_step_counter_increments():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState({"p": p})
    for i in range(1, 4):
        adam_step(state, {"p": np.ones(1, dtype=np.float32)})
        assert state.step_count == i
