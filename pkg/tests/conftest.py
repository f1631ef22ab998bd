import numpy as np
import pytest

from pudm.tensor_nn import init_params

ACCEPTANCE: list[tuple[str, bool, str]] = []


def fd_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f(params)`` for every parameter entry."""
    out = params.zeros_like()
    for p, g in zip(params.arrays(), out.arrays()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(params)
            flat[i] = old - h
            down = f(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def small_net():
    """Random net with fewer than 500 parameters."""
    params = init_params(2, hidden=(12, 12), time_dim=4, rng=np.random.default_rng(7))
    # non-zero biases and a full-scale last layer so every path carries gradient
    rng = np.random.default_rng(8)
    for b in params.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    params.weights[-1] *= 10
    assert params.n_params() <= 500
    return params


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def gaussian_optimal_eps(mu, var, sched):
    """Posterior-mean noise predictor for 1-D data ``N(mu, var)``; affine in ``x_t``."""

    def eps(x, t):
        abar = sched.alpha_bars[t - 1]
        return np.sqrt(1 - abar) * (x - np.sqrt(abar) * mu) / (abar * var + 1 - abar)

    eps.data_dim = 1
    return eps
