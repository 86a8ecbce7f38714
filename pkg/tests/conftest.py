import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_graph():
    """Each test starts from an empty autodiff tape."""
    from attnagg.tensor import reset_graph

    reset_graph()
    yield


def finite_difference(f, leaves, eps=1e-5):
    """Central-difference gradients of the scalar f() w.r.t. each leaf tensor.

    Independent oracle used across the suite: perturbs raw values in place,
    recomputes f under no_grad, never touches the autodiff path it checks.
    """
    from attnagg.tensor import no_grad

    def scalar():
        out = f()
        return out if isinstance(out, float) else out.item()

    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.values)
        flat = leaf.values.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = scalar()
            flat[i] = orig - eps
            with no_grad():
                fm = scalar()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor); floor encodes the absolute-error
    cushion (rtol 1e-4 with this floor is atol 1e-7)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
