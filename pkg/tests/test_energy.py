import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shiftcp.energy import (
    EnergyConfig,
    EnergyMlp,
    energy_margin_loss,
    energy_score,
    grad_check,
    init_mlp,
    mlp_forward,
    softmax,
    total_loss,
    train_ebm,
)
from shiftcp.errors import DivergenceError, InputError
from shiftcp.synthetic import in_out_fixture

logit_vectors = arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50))


def scalar_total_loss(model, xs, ys, outs, lam, m_in, m_out):
    """Loop-based recomputation of the objective, one example at a time."""
    t = model.temperature

    def logits_of(x):
        a = list(x)
        for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = [sum(w[i][j] * a[j] for j in range(len(a))) + b[i] for i in range(len(b))]
            a = z if layer == len(model.weights) - 1 else [max(0.0, v) for v in z]
        return a

    def lse(v):
        top = max(v)
        return top + math.log(sum(math.exp(u - top) for u in v))

    ce, e_in, e_out = 0.0, [], []
    for x, y in zip(xs, ys):
        f = [v / t for v in logits_of(x)]
        ce += lse(f) - f[y]
        e_in.append(-t * lse(f))
    for x in outs:
        e_out.append(-t * lse([v / t for v in logits_of(x)]))
    reg = (sum(max(0.0, e - m_in) ** 2 for e in e_in) / len(e_in)
           + sum(max(0.0, m_out - e) ** 2 for e in e_out) / len(e_out))
    return ce / len(xs) + lam * reg


class TestSoftmax:
    def test_values(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
        np.testing.assert_allclose(softmax([math.log(3), 0.0]), [0.75, 0.25])
        np.testing.assert_allclose(softmax([1000.0, 0.0]), [1.0, 0.0])

    @given(logit_vectors, st.floats(0.05, 20))
    def test_sums_to_one_and_argmax(self, f, t):
        p = softmax(f, t)
        assert abs(p.sum() - 1) < 1e-12
        assert p[np.argmax(f)] == p.max()

    @given(logit_vectors, st.floats(0.1, 10), st.floats(-100, 100))
    def test_translation(self, f, t, c):
        assert energy_score(f + c, t) == pytest.approx(energy_score(f, t) - c, abs=1e-9)
        np.testing.assert_allclose(softmax(f + c, t), softmax(f, t), atol=1e-12)

    @given(logit_vectors, st.floats(0.1, 10))
    def test_log_prob_energy_identity(self, f, t):
        p = softmax(f, t)
        e = energy_score(f, t)
        keep = p > 1e-300
        np.testing.assert_allclose(t * np.log(p[keep]), f[keep] + e, atol=1e-9)


class TestEnergy:
    def test_values(self):
        assert energy_score([5.0]) == -5.0
        assert energy_score([0.0, 0.0]) == pytest.approx(-0.6931471805599453)
        assert energy_score([2.0, 2.0], 2.0) == pytest.approx(-2 * (1 + math.log(2)))

    def test_margin_loss(self):
        # out-of-distribution energies are penalized only below m_out
        assert energy_margin_loss([-10], [-30], -5, -35) == 0
        assert energy_margin_loss([-3], [-30], -5, -35) == pytest.approx(4)
        assert energy_margin_loss([-10], [-40], -5, -35) == pytest.approx(25)
        assert energy_margin_loss([-3], [-40], -5, -35) == pytest.approx(29)

    def test_margin_loss_empty(self):
        with pytest.raises(InputError):
            energy_margin_loss([], [-1], -5, -35)


class TestConfig:
    def test_defaults(self):
        cfg = EnergyConfig()
        assert (cfg.lam, cfg.m_in, cfg.m_out) == (0.01, -5.0, -35.0)
        assert (cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.hidden) == (0.01, 200, 64, (64, 8))

    @pytest.mark.parametrize("kwargs", [
        {"lam": -1}, {"learning_rate": 0}, {"m_in": -40.0}, {"temperature": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InputError):
            EnergyConfig(**kwargs)


class TestForward:
    def test_zero_network(self):
        model = EnergyMlp([np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
        feats, logits = mlp_forward(model, [1.0, -2.0])
        np.testing.assert_array_equal(logits, [0.0, 0.0])
        np.testing.assert_allclose(softmax(logits), [0.5, 0.5])
        assert feats.shape == (3,)

    def test_single_layer(self):
        w = np.array([[1.0, 2.0], [3.0, -1.0]])
        model = EnergyMlp([w], [np.array([0.5, -0.5])])
        _, logits = mlp_forward(model, [2.0, 1.0])
        # [1*2 + 2*1 + 0.5, 3*2 - 1*1 - 0.5]
        np.testing.assert_allclose(logits, [4.5, 4.5])

    def test_feature_width(self):
        model = init_mlp([3, 7, 5, 2], seed=1)
        feats, logits = model.forward(np.random.default_rng(0).normal(size=(4, 3)))
        assert feats.shape == (4, 5) and logits.shape == (4, 2)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            mlp_forward(init_mlp([3, 2]), [1.0, 2.0])

    def test_json_round_trip(self, tmp_path):
        model = init_mlp([2, 4, 3], seed=5, temperature=1.5)
        model.save(tmp_path / "m.json")
        back = EnergyMlp.load(tmp_path / "m.json")
        for a, b in zip(model.weights + model.biases, back.weights + back.biases):
            np.testing.assert_array_equal(a, b)
        assert back.temperature == 1.5 and back.layer_dims == [2, 4, 3]


def _random_case(seed):
    rng = np.random.default_rng(seed)
    model = init_mlp([2, 4, 2], seed=seed)
    xin, yin = rng.normal(size=(6, 2)), rng.integers(0, 2, 6)
    xout = rng.normal(size=(5, 2)) * 30
    # margins placed so that both hinges are active on these batches
    m_in = float(model.energy(xin).min()) - 0.5
    cfg = EnergyConfig(lam=0.5, m_in=m_in, m_out=m_in - 0.5)
    return model, (xin, yin), xout, cfg


class TestLoss:
    def test_lambda_zero_is_cross_entropy(self):
        model, batch, out, cfg = _random_case(0)
        cfg0 = EnergyConfig(lam=0.0)
        p = model.predict_proba(batch[0])
        ce = -np.mean(np.log(p[np.arange(6), batch[1]]))
        assert total_loss(batch, None, model, cfg0) == pytest.approx(ce, rel=1e-12)
        assert total_loss(batch, out, model, cfg0) == pytest.approx(ce, rel=1e-12)

    def test_inactive_hinges(self):
        model, batch, out, _ = _random_case(1)
        cfg = EnergyConfig(lam=1.0, m_in=1e3, m_out=-1e3)
        plain = total_loss(batch, None, model, EnergyConfig(lam=0))
        assert total_loss(batch, out, model, cfg) == pytest.approx(plain, rel=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_reimplementation(self, seed):
        model, batch, out, cfg = _random_case(seed)
        expected = scalar_total_loss(model, batch[0].tolist(), batch[1].tolist(), out.tolist(),
                                     cfg.lam, cfg.m_in, cfg.m_out)
        assert total_loss(batch, out, model, cfg) == pytest.approx(expected, rel=1e-9)

    def test_requires_out_batch(self):
        model, batch, _, cfg = _random_case(0)
        with pytest.raises(InputError):
            total_loss(batch, None, model, cfg)


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_networks(self, seed):
        model, batch, out, cfg = _random_case(seed)
        assert (model.energy(out) < cfg.m_out).any()
        assert grad_check(model, batch, out, cfg) < 1e-4

    def test_lambda_zero(self):
        model, batch, out, _ = _random_case(3)
        assert grad_check(model, batch, out, EnergyConfig(lam=0.0)) < 1e-4

    def test_inactive_hinges_give_same_gradients(self):
        from shiftcp.energy import loss_and_grads
        model, batch, out, _ = _random_case(4)
        _, (gw, gb) = loss_and_grads(batch, out, model, EnergyConfig(lam=1.0, m_in=1e3, m_out=-1e3))
        _, (gw0, gb0) = loss_and_grads(batch, None, model, EnergyConfig(lam=0.0))
        for a, b in zip(gw + gb, gw0 + gb0):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


class TestTraining:
    def test_fixture_separates_energies(self):
        data = in_out_fixture(seed=0)
        test = in_out_fixture(seed=1, n=1000)
        result = train_ebm(data.x, data.y, data.ood)
        model = result.model
        acc = np.mean(model.predict_proba(test.x).argmax(axis=1) == test.y)
        assert acc > 0.95
        assert model.energy(test.x).mean() < model.energy(test.ood).mean()
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_lambda_zero_ignores_pool(self):
        data = in_out_fixture(seed=2, n=200)
        cfg = EnergyConfig(lam=0.0, epochs=5)
        a = train_ebm(data.x, data.y, data.ood, cfg).model
        b = train_ebm(data.x, data.y, None, cfg).model
        for u, v in zip(a.weights + a.biases, b.weights + b.biases):
            np.testing.assert_array_equal(u, v)

    def test_zero_epochs(self):
        data = in_out_fixture(seed=2, n=100)
        cfg = EnergyConfig(epochs=0, seed=4)
        result = train_ebm(data.x, data.y, data.ood, cfg)
        init = init_mlp([2, 64, 8, 2], seed=4)
        for u, v in zip(result.model.weights, init.weights):
            np.testing.assert_array_equal(u, v)
        assert result.loss_trace == []

    def test_deterministic(self):
        data = in_out_fixture(seed=3, n=200)
        cfg = EnergyConfig(epochs=3, seed=9)
        a = train_ebm(data.x, data.y, data.ood, cfg)
        b = train_ebm(data.x, data.y, data.ood, cfg)
        assert a.loss_trace == b.loss_trace
        for u, v in zip(a.model.weights, b.model.weights):
            np.testing.assert_array_equal(u, v)

    def test_divergence(self):
        data = in_out_fixture(seed=3, n=200)
        with pytest.raises(DivergenceError) as exc, np.errstate(all="ignore"):
            train_ebm(data.x * 1e200, data.y, data.ood * 1e200,
                      EnergyConfig(epochs=2, learning_rate=1e10))
        assert exc.value.learning_rate == 1e10

    def test_needs_pool_when_regularized(self):
        data = in_out_fixture(seed=3, n=50)
        with pytest.raises(InputError):
            train_ebm(data.x, data.y, None, EnergyConfig(epochs=1))

    def test_needs_two_classes(self):
        with pytest.raises(InputError):
            train_ebm(np.zeros((4, 2)), np.zeros(4, dtype=int), None, EnergyConfig(lam=0))
