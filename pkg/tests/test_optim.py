import numpy as np
import pytest

from dfpir.optim import OptimState, adam_step
from dfpir.tensor import Tensor


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop over steps, written out longhand."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = np.array([1.0, -2.0])
        state = OptimState.for_params([p], lr=0.1)
        for _ in range(7):
            adam_step([p], [np.zeros(2)], state)
        assert p.tolist() == [1.0, -2.0]

    def test_none_gradient_counts_as_zero(self):
        p = np.array([3.0])
        adam_step([p], [None], OptimState.for_params([p]))
        assert p.tolist() == [3.0]

    def test_first_step(self):
        p = np.zeros(1)
        adam_step([p], [np.ones(1)], OptimState.for_params([p], lr=1e-4))
        assert p[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_zero_lr(self):
        p = np.array([0.5, 0.25])
        state = OptimState.for_params([p], lr=0.0)
        for _ in range(3):
            adam_step([p], [np.array([1.0, -3.0])], state)
        assert p.tolist() == [0.5, 0.25]

    def test_matches_longhand(self):
        grads = [0.3, -1.2, 0.7, 2.0, -0.1]
        p = np.array([0.4])
        state = OptimState.for_params([p], lr=0.01)
        for g in grads:
            adam_step([p], [np.array([g])], state)
        assert p[0] == pytest.approx(reference_adam(0.4, grads, 0.01), rel=1e-12)
        assert state.step == len(grads)

    def test_deterministic_on_tensors(self):
        def run():
            p = Tensor(np.linspace(-1, 1, 6).astype(np.float32))
            state = OptimState.for_params([p], lr=1e-3)
            for k in range(5):
                adam_step([p], [np.sin(np.arange(6) + k).astype(np.float32)], state)
            return p.data

        a, b = run(), run()
        assert a.dtype == np.float32 and np.array_equal(a, b)

    def test_shape_checks(self):
        p = np.zeros(3)
        state = OptimState.for_params([p])
        with pytest.raises(ValueError):
            adam_step([p], [np.zeros(2)], state)
        with pytest.raises(ValueError):
            adam_step([p, p], [None, None], state)
