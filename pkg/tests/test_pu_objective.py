import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, max_rel_err
from pudm.diffusion import bce_grad, bce_loss, draw_noise, ell_backward, loss_ell, make_schedule
from pudm.errors import NumericError
from pudm.pu_objective import (
    Correction,
    PuConfig,
    PuTerms,
    branch_objective,
    check_finite,
    pn_loss,
    pu_gradient_step,
    pu_loss,
    pu_objective,
    pu_terms,
    supervised_objective,
    unsupervised_objective,
)
from pudm.tensor_nn import AdamWState, DenoiserParams, adamw_step

SCHED = make_schedule()


def terms(l_s_plus, l_u_minus, l_s_minus):
    return PuTerms(l_s_plus, l_u_minus, l_s_minus, None, None)


def frozen(n, seed, k=1):
    return draw_noise(np.random.default_rng(seed), n, 2, SCHED.T, k)


@pytest.fixture
def batches():
    rng = np.random.default_rng(11)
    u = rng.standard_normal((5, 2))
    s = rng.standard_normal((3, 2)) + 1.0
    return u, s


class TestPuConfig:
    @pytest.mark.parametrize("kw", [{"beta": -0.1}, {"beta": 1.5}, {"batch_u": 0}, {"batch_s": 0},
                                    {"mc_draws": 0}, {"correction": "relu"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            PuConfig(**kw)

    def test_string_correction(self):
        assert PuConfig(correction="abs").correction is Correction.ABS


class TestPuLoss:
    def test_hand_picked(self):
        assert pu_loss(terms(0.5, 1.0, 2.0), PuConfig(beta=0.1)) == pytest.approx(0.85, abs=1e-15)

    def test_negative_deficit(self):
        t = terms(0.5, 0.1, 4.0)  # deficit 0.1 - 0.1*4 = -0.3
        assert pu_loss(t, PuConfig(beta=0.1)) == pytest.approx(0.05, abs=1e-15)
        assert pu_loss(t, PuConfig(beta=0.1, correction="abs")) == pytest.approx(0.35, abs=1e-15)

    @pytest.mark.parametrize("mode", ["max", "abs"])
    def test_beta_zero(self, mode):
        assert pu_loss(terms(3.0, 0.7, 9.0), PuConfig(beta=0.0, correction=mode)) == 0.7

    def test_non_negative_randomized(self):
        rng = np.random.default_rng(0)
        for mode in ("max", "abs"):
            for _ in range(10_000):
                a, b, c = rng.exponential(2.0, 3)
                assert pu_loss(terms(a, b, c), PuConfig(beta=float(rng.uniform()), correction=mode)) >= 0

    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1))
    @settings(max_examples=300, deadline=None)
    def test_abs_dominates_max(self, a, b, c, beta):
        lo = pu_loss(terms(a, b, c), PuConfig(beta=beta))
        hi = pu_loss(terms(a, b, c), PuConfig(beta=beta, correction="abs"))
        assert 0 <= lo <= hi

    def test_beta_derivative(self):
        t = terms(0.9, 2.0, 1.4)
        h, beta = 1e-6, 0.2
        numeric = (pu_loss(t, PuConfig(beta=beta + h)) - pu_loss(t, PuConfig(beta=beta - h))) / (2 * h)
        assert numeric == pytest.approx(0.9 - 1.4, rel=1e-8)

    def test_branch_objective(self):
        cfg_max, cfg_abs = PuConfig(beta=0.1), PuConfig(beta=0.1, correction="abs")
        pos = terms(0.5, 1.0, 2.0)
        assert branch_objective(pos, cfg_max) == pu_loss(pos, cfg_max)
        neg = terms(0.5, 0.1, 4.0)
        assert branch_objective(neg, cfg_max) == pytest.approx(0.3, abs=1e-15)
        assert branch_objective(neg, cfg_abs) == pytest.approx(0.35, abs=1e-15)


class TestReductions:
    def test_single_example(self, small_net):
        x = np.array([[0.3, -0.2]])
        t, eps = frozen(1, 3)
        res = unsupervised_objective(x, small_net, None, SCHED, draws=(t, eps))
        assert res.value == loss_ell(small_net, x, None, SCHED, t=t, eps=eps).ell_hat[0]

    def test_perfect_denoiser_is_zero(self):
        t = 300
        w = np.zeros((2, 2 + 4))
        w[:, :2] = np.eye(2) / math.sqrt(1 - SCHED.alpha_bars[t - 1])
        params = DenoiserParams([w], [np.zeros(2)], time_dim=4)
        eps = np.random.default_rng(0).standard_normal((4, 1, 2))
        res = unsupervised_objective(np.zeros((4, 2)), params, None, SCHED, draws=(np.full((4, 1), t), eps))
        assert res.value == pytest.approx(0.0, abs=1e-28)

    def test_unsupervised_equals_pu_beta_zero(self, small_net, batches):
        u, s = batches
        du, ds = frozen(5, 1), frozen(3, 2)
        a = unsupervised_objective(u, small_net, None, SCHED, draws=du)
        b = pu_objective(u, s, small_net, None, PuConfig(beta=0.0), SCHED, draws=(du, ds))
        assert a.value == b.value
        for x, y in zip(a.grads.arrays(), b.grads.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_pn_extremes(self, small_net, batches):
        u, s = batches
        ds, dn = frozen(3, 1), frozen(5, 2)
        l_plus = np.mean(bce_loss(loss_ell(small_net, s, None, SCHED, t=ds[0], eps=ds[1]).ell_hat, 1))
        l_n = np.mean(loss_ell(small_net, u, None, SCHED, t=dn[0], eps=dn[1]).ell_hat)
        assert pn_loss(s, u, small_net, None, 1.0, SCHED, draws=(ds, dn)).value == pytest.approx(l_plus, rel=1e-15)
        assert pn_loss(s, u, small_net, None, 0.0, SCHED, draws=(ds, dn)).value == pytest.approx(l_n, rel=1e-15)

    def test_supervised_ln2_fixed_point(self, small_net, batches, monkeypatch):
        import pudm.pu_objective as po

        u, s = batches
        real = po.loss_ell

        def fake(params, x0, *args, **kw):
            out = real(params, x0, *args, **kw)
            if x0.shape[0] == 3:
                out.ell_hat = np.full(3, math.log(2))
            return out

        monkeypatch.setattr(po, "loss_ell", fake)
        res = supervised_objective(u, s, small_net, np.random.default_rng(0), SCHED)
        assert res.terms["L_S_plus"] == pytest.approx(math.log(2), rel=1e-15)


class TestTerms:
    def test_non_negative(self, small_net, batches):
        u, s = batches
        tm = pu_terms(u, s, small_net, np.random.default_rng(0), PuConfig(), SCHED)
        assert min(tm.L_S_plus, tm.L_U_minus, tm.L_S_minus) >= 0

    def test_single_sensitive_example(self, small_net):
        s = np.array([[1.0, 1.0]])
        d = frozen(1, 5)
        tm = pu_terms(np.zeros((2, 2)), s, small_net, None, PuConfig(), SCHED, draws=(frozen(2, 4), d))
        v = loss_ell(small_net, s, None, SCHED, t=d[0], eps=d[1]).ell_hat[0]
        assert tm.L_S_minus == v
        assert tm.L_S_plus == pytest.approx(-math.log(1 - math.exp(-v)), rel=1e-12)

    def test_shared_draw_for_sensitive_terms(self, small_net, batches):
        u, s = batches
        tm = pu_terms(u, s, small_net, (np.random.default_rng(1), np.random.default_rng(2)), PuConfig(), SCHED)
        assert tm.L_S_minus == pytest.approx(np.mean(tm.s.ell_hat), rel=1e-15)
        assert tm.L_S_plus == pytest.approx(np.mean(bce_loss(tm.s.ell_hat, 1)), rel=1e-15)

    @pytest.mark.parametrize("fn", ["pu", "sup", "unsup", "pn"])
    def test_empty_batch(self, small_net, fn):
        good, empty = np.zeros((2, 2)), np.zeros((0, 2))
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            if fn == "pu":
                pu_terms(good, empty, small_net, rng, PuConfig(), SCHED)
            elif fn == "sup":
                supervised_objective(good, empty, small_net, rng, SCHED)
            elif fn == "unsup":
                unsupervised_objective(empty, small_net, rng, SCHED)
            else:
                pn_loss(empty, good, small_net, rng, 0.1, SCHED)


def support_losses(params, points, seed):
    """Per-point loss values with one frozen draw per support point."""
    t, eps = frozen(len(points), seed)
    return loss_ell(params, points, None, SCHED, t=t, eps=eps).ell_hat


class TestMixtureIdentity:
    """U built as the exact beta-mixture of finite S and N supports."""

    @pytest.fixture
    def supports(self, small_net):
        rng = np.random.default_rng(21)
        n_pts, s_pts = rng.standard_normal((7, 2)) - 1, rng.standard_normal((4, 2)) + 1
        f_n = bce_loss(support_losses(small_net, n_pts, 1), 0)
        f_s0 = bce_loss(support_losses(small_net, s_pts, 2), 0)
        f_s1 = bce_loss(support_losses(small_net, s_pts, 2), 1)
        p_n, p_s = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(4))
        return f_n, f_s0, f_s1, p_n, p_s

    @pytest.mark.parametrize("beta", [0.0, 0.05, 0.1, 0.5, 0.9])
    def test_enumeration(self, supports, beta):
        f_n, f_s0, _, p_n, p_s = supports
        # U puts mass beta*p_s on S points and (1-beta)*p_n on N points
        e_u = beta * np.dot(p_s, f_s0) + (1 - beta) * np.dot(p_n, f_n)
        lhs = e_u - beta * np.dot(p_s, f_s0)
        assert abs(lhs - (1 - beta) * np.dot(p_n, f_n)) <= 1e-12

    def test_pn_equals_pu_reexpression(self, supports):
        f_n, f_s0, f_s1, p_n, p_s = supports
        beta = 0.1
        pn = beta * np.dot(p_s, f_s1) + (1 - beta) * np.dot(p_n, f_n)
        e_u = beta * np.dot(p_s, f_s0) + (1 - beta) * np.dot(p_n, f_n)
        pu = beta * np.dot(p_s, f_s1) + e_u - beta * np.dot(p_s, f_s0)
        assert abs(pn - pu) <= 1e-12

    def test_monte_carlo_unbiased(self, supports):
        f_n, f_s0, _, p_n, p_s = supports
        beta, n, reps = 0.1, 400, 4000
        rng = np.random.default_rng(5)
        target = (1 - beta) * np.dot(p_n, f_n)
        est = np.empty(reps)
        for r in range(reps):
            from_s = rng.random(n) < beta
            vals = np.where(from_s, f_s0[rng.choice(4, n, p=p_s)], f_n[rng.choice(7, n, p=p_n)])
            s_vals = f_s0[rng.choice(4, 50, p=p_s)]
            est[r] = vals.mean() - beta * s_vals.mean()
        se = est.std(ddof=1) / math.sqrt(reps)
        assert abs(est.mean() - target) < 3 * se


def neg_batches():
    # sensitive points far from the data give large losses, so beta*L_S- > L_U-
    rng = np.random.default_rng(31)
    return rng.standard_normal((5, 2)) * 0.1, rng.standard_normal((3, 2)) + 30.0


class TestGradients:
    """Analytic gradients against central differences with frozen draws."""

    def check(self, params, f, analytic):
        assert max_rel_err(analytic, fd_grad(f, params)) <= 1e-4

    def test_unsupervised(self, small_net, batches):
        u, _ = batches
        d = frozen(5, 1, k=2)
        res = unsupervised_objective(u, small_net, None, SCHED, k=2, draws=d)
        self.check(small_net, lambda p: unsupervised_objective(u, p, None, SCHED, k=2, draws=d).value, res.grads)

    def test_supervised(self, small_net, batches):
        u, s = batches
        d = (frozen(5, 1), frozen(3, 2))
        res = supervised_objective(u, s, small_net, None, SCHED, draws=d)
        self.check(small_net, lambda p: supervised_objective(u, s, p, None, SCHED, draws=d).value, res.grads)

    def test_pn(self, small_net, batches):
        u, s = batches
        d = (frozen(3, 1), frozen(5, 2))
        res = pn_loss(s, u, small_net, None, 0.3, SCHED, draws=d)
        self.check(small_net, lambda p: pn_loss(s, u, p, None, 0.3, SCHED, draws=d).value, res.grads)

    @pytest.mark.parametrize("mode", ["max", "abs"])
    @pytest.mark.parametrize("branch", ["pos", "neg"])
    def test_pu(self, small_net, batches, mode, branch):
        u, s = batches if branch == "pos" else neg_batches()
        cfg = PuConfig(beta=0.1 if branch == "pos" else 0.9, correction=mode)
        d = (frozen(5, 1), frozen(3, 2))
        res = pu_objective(u, s, small_net, None, cfg, SCHED, draws=d)
        assert res.branch == branch

        def f(p):
            return branch_objective(pu_terms(u, s, p, None, cfg, SCHED, draws=d), cfg)

        self.check(small_net, f, res.grads)


class TestGradientStep:
    def reference(self, params, u, s, cfg, seed_u, seed_s, lr):
        """Independent PU step: draws replayed, gradient rebuilt from multipliers."""
        du = draw_noise(np.random.default_rng(seed_u), len(u), 2, SCHED.T)
        ds = draw_noise(np.random.default_rng(seed_s), len(s), 2, SCHED.T)
        lu = loss_ell(params, u, None, SCHED, t=du[0], eps=du[1])
        ls = loss_ell(params, s, None, SCHED, t=ds[0], eps=ds[1])
        n, m, b = len(u), len(s), cfg.beta
        deficit = lu.ell_hat.mean() - b * ls.ell_hat.mean()
        g1 = bce_grad(ls.ell_hat, 1)
        if deficit >= 0:
            # grad of b*L_S+ + L_U- - b*L_S-
            cu, cs = np.full(n, 1 / n), b * g1 / m - b / m
        elif cfg.correction is Correction.MAX:
            # grad of b*L_S- - L_U-
            cu, cs = np.full(n, -1 / n), np.full(m, b / m)
        else:
            cu, cs = np.full(n, -1 / n), b * g1 / m + b / m
        grads = ell_backward(params, lu, cu)
        gs = ell_backward(params, ls, cs)
        for a, c in zip(grads.arrays(), gs.arrays()):
            a += c
        ref = params.copy()
        adamw_step(ref, grads, AdamWState.zeros(ref), lr)
        return ref, deficit

    @pytest.mark.parametrize("mode", ["max", "abs"])
    @pytest.mark.parametrize("case", ["pos", "neg"])
    def test_matches_reference(self, small_net, batches, mode, case):
        u, s = batches if case == "pos" else neg_batches()
        cfg = PuConfig(beta=0.1 if case == "pos" else 0.9, correction=mode)
        ref, deficit = self.reference(small_net, u, s, cfg, 41, 42, 1e-3)
        assert (deficit >= 0) == (case == "pos")
        p = small_net.copy()
        rng = (np.random.default_rng(41), np.random.default_rng(42))
        _, state, diag = pu_gradient_step(u, s, p, AdamWState.zeros(p), 1e-3, cfg, rng, SCHED, step=1)
        assert diag.branch == case
        assert state.step == 1
        worst = max(float(np.max(np.abs((a - o) - (r - o))))
                    for a, r, o in zip(p.arrays(), ref.arrays(), small_net.arrays()))
        assert worst <= 1e-12

    def test_diagnostics(self, small_net, batches):
        u, s = batches
        p = small_net.copy()
        cfg = PuConfig(beta=0.1)
        _, _, diag = pu_gradient_step(u, s, p, AdamWState.zeros(p), 1e-3, cfg, np.random.default_rng(0), SCHED, 7)
        assert diag.step == 7 and diag.lr == 1e-3
        assert diag.branch == ("pos" if diag.L_U_minus - 0.1 * diag.L_S_minus >= 0 else "neg")
        assert diag.objective == pytest.approx(pu_loss(terms(diag.L_S_plus, diag.L_U_minus, diag.L_S_minus), cfg))

    def test_beta_zero_matches_unsupervised_step(self, small_net, batches):
        u, s = batches
        a, b = small_net.copy(), small_net.copy()
        pu_gradient_step(u, s, a, AdamWState.zeros(a), 1e-3, PuConfig(beta=0.0),
                         (np.random.default_rng(3), np.random.default_rng(4)), SCHED)
        res = unsupervised_objective(u, b, np.random.default_rng(3), SCHED)
        adamw_step(b, res.grads, AdamWState.zeros(b), 1e-3)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_non_finite_aborts_with_step(self, small_net, batches):
        u, s = batches
        p = small_net.copy()
        p.weights[0][0, 0] = np.inf
        with pytest.raises(NumericError) as info:
            pu_gradient_step(u, s, p, AdamWState.zeros(p), 1e-3, PuConfig(), np.random.default_rng(0), SCHED, 12)
        # forward-pass failures carry no step; the training loop stamps it
        assert isinstance(info.value, ArithmeticError)

    def test_check_finite_records_step(self, small_net, batches):
        u, _ = batches
        res = unsupervised_objective(u, small_net, np.random.default_rng(0), SCHED)
        res.value = math.nan
        with pytest.raises(NumericError) as info:
            check_finite(res, 9)
        assert info.value.step == 9
