"""Mixture-density channel network: pdf, heads, NLL, sampling, fitting."""

import math

import numpy as np
import pytest

from mclink import nn
from mclink.channel import normalized_slot_moments, scenario, with_overrides
from mclink.nn import Tensor, gradient_check
from mclink.surrogate import (
    ChannelPair,
    ChannelSurrogate,
    FitConfig,
    MixtureParams,
    TrainingDivergedError,
    build_mdn_net,
    fit_channel,
    generate_pairs,
    mdn_forward,
    mdn_nll,
    mixture_pdf,
    pairs_to_arrays,
    sample_surrogate,
    single_gaussian_nll,
    write_pairs_csv,
)

S1 = scenario("scenario1")
INV_SQRT_2PI = 0.3989422804014327
HALF_LN_2PI = 0.9189385332046727
# expected normalized symbol for the saturated context (1, 1) on scenario 1
MEAN_AT_FULL_CONTEXT = 1.0340127962082382


def zeroed_final_layer(net):
    net.weights[-1].data[:] = 0.0
    net.biases[-1].data[:] = 0.0
    return net


class TestMixtureParams:
    def test_standard_normal_density(self):
        mp = MixtureParams(pi=[0.5, 0.5], mu=[0.0, 0.0], sigma2=[1.0, 1.0])
        assert mixture_pdf(mp, 0.0) == pytest.approx(INV_SQRT_2PI, rel=1e-12)

    def test_degenerate_weight_selects_single_kernel(self):
        mp = MixtureParams(pi=[1.0, 0.0], mu=[0.3, 9.9], sigma2=[0.04, 1.0])
        lone = MixtureParams(pi=[1.0], mu=[0.3], sigma2=[0.04])
        for w in (-0.5, 0.3, 1.1):
            assert mixture_pdf(mp, w) == pytest.approx(mixture_pdf(lone, w), rel=1e-12)

    def test_bimodal_value(self):
        mp = MixtureParams(pi=[0.5, 0.5], mu=[-1.0, 1.0], sigma2=[1.0, 1.0])
        assert mixture_pdf(mp, 0.0) == pytest.approx(0.24197072451914337, rel=1e-12)

    def test_invariants_enforced(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MixtureParams(pi=[0.6, 0.6], mu=[0, 0], sigma2=[1, 1])
        with pytest.raises(ValueError, match="non-negative"):
            MixtureParams(pi=[1.5, -0.5], mu=[0, 0], sigma2=[1, 1])
        with pytest.raises(ValueError, match="variances"):
            MixtureParams(pi=[1.0], mu=[0.0], sigma2=[1e-9])

    def test_mean_and_variance(self):
        mp = MixtureParams(pi=[0.25, 0.75], mu=[0.0, 2.0], sigma2=[1.0, 4.0])
        assert mp.mean() == pytest.approx(1.5)
        assert mp.variance() == pytest.approx(0.25 * 1 + 0.75 * 4 + 0.25 * 2.25 + 0.75 * 0.25)

    def test_integrates_to_one(self):
        grid = np.linspace(-10.0, 10.0, 20001)
        for seed in range(3):
            rng = np.random.default_rng(seed)
            raw = rng.uniform(0.2, 3.0, size=2)
            mp = MixtureParams(pi=raw / raw.sum(), mu=rng.uniform(-1, 2, 2),
                               sigma2=rng.uniform(0.01, 2.0, 2))
            mass = np.trapezoid(mixture_pdf(mp, grid), grid)
            assert abs(mass - 1.0) < 1e-3


class TestMdnForward:
    def test_zero_final_layer_gives_unit_mixture(self):
        net = zeroed_final_layer(build_mdn_net(np.random.default_rng(0)))
        mp = mdn_forward(net, np.array([0.3, 0.7]))
        assert np.allclose(mp.pi, [0.5, 0.5])
        assert np.allclose(mp.mu, [0.0, 0.0])
        assert np.allclose(mp.sigma2, [1.0, 1.0])

    def test_weights_normalized_for_any_context(self):
        net = build_mdn_net(np.random.default_rng(1))
        rng = np.random.default_rng(2)
        for _ in range(20):
            mp = mdn_forward(net, rng.uniform(size=2))
            assert abs(mp.pi.sum() - 1.0) < 1e-6

    def test_batched_contexts(self):
        net = build_mdn_net(np.random.default_rng(1))
        ctx = np.random.default_rng(3).uniform(size=(8, 2))
        mp = mdn_forward(net, ctx)
        assert mp.pi.shape == (8, 2)
        single = mdn_forward(net, ctx[4])
        assert np.allclose(mp.mu[4], single.mu)

    def test_variance_clamped_into_bounds(self):
        net = zeroed_final_layer(build_mdn_net(np.random.default_rng(0)))
        net.biases[-1].data[4:6] = [-50.0, 50.0]   # extreme log-variances
        mp = mdn_forward(net, np.array([0.5, 0.5]))
        assert mp.sigma2[0] == pytest.approx(1e-6)
        assert mp.sigma2[1] == pytest.approx(1e2)


class TestMdnNll:
    def _spiked_net(self, mu1=0.3):
        # final bias pins the heads: pi ~ [1, 0], mu = [mu1, .], sigma2 = [1, .]
        net = zeroed_final_layer(build_mdn_net(np.random.default_rng(0)))
        net.biases[-1].data[:] = [40.0, -40.0, mu1, 5.0, 0.0, 0.0]
        return net

    def test_single_pair_at_kernel_mean(self):
        net = self._spiked_net(mu1=0.3)
        loss = mdn_nll(net, [ChannelPair(0.5, 0.5, 0.3)])
        assert float(loss.data) == pytest.approx(HALF_LN_2PI, rel=1e-9)

    def test_matches_mixture_pdf_route(self):
        net = build_mdn_net(np.random.default_rng(4))
        pair = ChannelPair(0.2, 0.9, 0.7)
        nll = float(mdn_nll(net, [pair]).data)
        dens = mixture_pdf(mdn_forward(net, np.array([0.2, 0.9])), 0.7)
        assert nll == pytest.approx(-math.log(dens), rel=1e-9)

    def test_duplicating_batch_leaves_mean_nll_unchanged(self):
        net = build_mdn_net(np.random.default_rng(5))
        pairs = [ChannelPair(0.1, 0.2, 0.15), ChannelPair(0.9, 0.4, 0.8)]
        once = float(mdn_nll(net, pairs).data)
        twice = float(mdn_nll(net, pairs + pairs).data)
        assert twice == pytest.approx(once, rel=1e-12)

    def test_empty_batch_rejected(self):
        net = build_mdn_net(np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            mdn_nll(net, [])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        net = build_mdn_net(rng, hidden=6)
        ctx = rng.uniform(size=(5, 2))
        tgt = rng.uniform(size=5)
        assert gradient_check(lambda: mdn_nll(net, (ctx, tgt)), net.parameters()) < 1e-4

    def test_nll_decreases_on_synthetic_gaussian_data(self):
        rng = np.random.default_rng(7)
        ctx = rng.uniform(size=(2000, 2))
        tgt = ctx[:, 0] + 0.05 * rng.standard_normal(2000)
        net = build_mdn_net(rng)
        opt = nn.SGD(net.parameters(), lr=1e-3, momentum=0.9)
        history = []
        for _ in range(10):
            order = rng.permutation(2000)
            total = 0.0
            for start in range(0, 2000, 256):
                sel = order[start:start + 256]
                loss = mdn_nll(net, (ctx[sel], tgt[sel]))
                loss.backward()
                opt.step()
                total += float(loss.data) * len(sel)
            history.append(total / 2000)
        assert history[9] < history[0]


class TestGeneratePairs:
    def test_forced_silence_yields_zero_symbols(self):
        class SilentUniform:
            """Generator facade that pins the context draws at zero."""

            def __init__(self, rng):
                self._rng = rng

            def uniform(self, *a, **k):
                return 0.0

            def __getattr__(self, name):
                return getattr(self._rng, name)

        quiet = with_overrides(S1, noise_std=0.0)
        pairs = generate_pairs(SilentUniform(np.random.default_rng(0)), quiet, 200)
        assert all(q.w_rx == 0.0 for q in pairs)

    def test_same_seed_reproduces_pairs(self):
        a = generate_pairs(np.random.default_rng(9), S1, 300)
        b = generate_pairs(np.random.default_rng(9), S1, 300)
        assert a == b

    def test_conditional_mean_of_saturated_bucket(self):
        rng = np.random.default_rng(10)
        pairs = generate_pairs(rng, S1, 20_000)
        ctx, tgt = pairs_to_arrays(pairs)
        bucket = (ctx[:, 0] >= 0.95)
        # E[w_rx] = E[w_curr] + E[w_prev] * isi ratio = 0.975 + 0.5 * 0.0340
        expected = 0.975 + 0.5 * (MEAN_AT_FULL_CONTEXT - 1.0)
        assert abs(tgt[bucket].mean() - expected) < 0.01

    def test_csv_export(self, tmp_path):
        pairs = generate_pairs(np.random.default_rng(1), S1, 5)
        path = tmp_path / "pairs.csv"
        write_pairs_csv(path, pairs)
        lines = path.read_text().splitlines()
        assert lines[0] == "w_curr,w_prev,w_rx"
        assert len(lines) == 6

    def test_count_validated(self):
        with pytest.raises(ValueError):
            generate_pairs(np.random.default_rng(0), S1, 0)


class TestSampleSurrogate:
    def test_degenerate_mixture_returns_mean(self):
        mp = MixtureParams(pi=[1.0, 0.0], mu=[0.42, 9.0], sigma2=[1e-6, 1.0])
        rng = np.random.default_rng(0)
        draws = np.array([sample_surrogate(rng, mp).data[0] for _ in range(50)])
        assert np.abs(draws - 0.42).max() < 5e-3

    def test_empirical_mean_matches_mixture_mean(self):
        mp = MixtureParams(pi=[0.3, 0.7], mu=[0.0, 1.0], sigma2=[0.04, 0.09])
        batch = MixtureParams(pi=np.tile(mp.pi, (100_000, 1)),
                              mu=np.tile(mp.mu, (100_000, 1)),
                              sigma2=np.tile(mp.sigma2, (100_000, 1)))
        draws = sample_surrogate(np.random.default_rng(1), batch).data
        se = math.sqrt(mp.variance() / 100_000)
        assert abs(draws.mean() - mp.mean()) < 3 * se

    def test_reparameterized_gradient_through_mean(self):
        mu = Tensor(np.array([[0.5, 2.0]]), requires_grad=True)
        pi = Tensor(np.array([[1.0, 0.0]]))
        s2 = Tensor(np.array([[0.25, 0.25]]))
        frozen = (np.array([0]), np.array([0.37]))

        def loss_fn():
            return nn.tsum(sample_surrogate(None, (pi, mu, s2), frozen_noise=frozen))

        loss_fn().backward()
        assert mu.grad[0, 0] == pytest.approx(1.0, rel=1e-12)
        assert mu.grad[0, 1] == 0.0
        assert gradient_check(loss_fn, [mu]) < 1e-6


class TestChannelSurrogate:
    def test_sampling_modes_run_and_differ(self):
        net = build_mdn_net(np.random.default_rng(2))
        ctx = Tensor(np.random.default_rng(3).uniform(size=(6, 2)))
        outs = {}
        for mode in ("sample", "mean", "relaxed"):
            surr = ChannelSurrogate(net=net, sample_mode=mode).freeze()
            outs[mode] = surr.sample_tensor(ctx, np.random.default_rng(4)).data
        assert outs["sample"].shape == outs["mean"].shape == outs["relaxed"].shape
        assert not np.allclose(outs["sample"], outs["mean"])

    def test_mean_mode_matches_mixture_mean(self):
        net = build_mdn_net(np.random.default_rng(2))
        surr = ChannelSurrogate(net=net, sample_mode="mean").freeze()
        ctx = np.array([[0.25, 0.75]])
        out = surr.sample_tensor(Tensor(ctx), None).data
        assert out[0] == pytest.approx(mdn_forward(net, ctx[0]).mean(), rel=1e-12)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="sample_mode"):
            ChannelSurrogate(net=build_mdn_net(np.random.default_rng(0)),
                             sample_mode="antithetic")

    def test_checkpoint_roundtrip(self, tmp_path):
        net = build_mdn_net(np.random.default_rng(5))
        surr = ChannelSurrogate(net=net, sample_mode="relaxed", temperature=0.7,
                                channel={"name": "scenario1"}).freeze()
        path = tmp_path / "surrogate.ckpt"
        surr.save(path)
        loaded = ChannelSurrogate.load(path)
        assert loaded.frozen and loaded.sample_mode == "relaxed"
        assert loaded.temperature == 0.7
        for a, b in zip(surr.state_arrays(), loaded.state_arrays()):
            assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def fitted_surrogate():
    rng = np.random.default_rng(12)
    pairs = generate_pairs(rng, S1, 12_000)
    surr, history = fit_channel(rng, S1, FitConfig(n_pairs=12_000), pairs=pairs)
    return surr, history, pairs


class TestFitChannel:
    def test_zero_epochs_returns_initial_net(self):
        pairs = generate_pairs(np.random.default_rng(1), S1, 1200)
        rng_fit = np.random.default_rng(11)
        surr, history = fit_channel(rng_fit, S1, FitConfig(max_epochs=0), pairs=pairs)
        reference = build_mdn_net(np.random.default_rng(11))
        for a, b in zip(surr.net.state_arrays(), reference.state_arrays()):
            assert np.array_equal(a, b)
        assert history["train_nll"] == [] and surr.frozen

    def test_beats_single_gaussian(self, fitted_surrogate):
        surr, history, pairs = fitted_surrogate
        ctx, tgt = pairs_to_arrays(pairs)
        n_val = len(pairs) // 10
        held_nll = float(mdn_nll(surr.net, (ctx[:n_val], tgt[:n_val])).data)
        gauss = single_gaussian_nll(tgt[n_val:], tgt[:n_val])
        assert held_nll <= gauss
        assert history["val_nll"][-1] <= history["val_nll"][0]

    def test_saturated_context_mean(self, fitted_surrogate):
        surr, _, _ = fitted_surrogate
        # (1,1) is the thin corner of the uniform context draw, hence the
        # wider band than the dense mid-range contexts get
        assert surr.mixture_at(1.0, 1.0).mean() == pytest.approx(
            MEAN_AT_FULL_CONTEXT, abs=0.07)

    def test_trained_variance_within_factor_two_of_simulator(self, fitted_surrogate):
        surr, _, _ = fitted_surrogate
        for w_curr in (0.5, 0.75, 1.0):
            for w_prev in (0.25, 0.75):
                mp = surr.mixture_at(w_curr, w_prev)
                _, sim_var = normalized_slot_moments(S1, w_curr, [w_prev])
                assert mp.variance() > 0.0
                assert 0.5 < mp.variance() / sim_var < 2.0

    def test_trained_mixture_normalizes_over_line(self, fitted_surrogate):
        surr, _, _ = fitted_surrogate
        grid = np.linspace(-10.0, 10.0, 20001)
        for w_curr in (0.0, 0.25, 0.5, 0.75, 1.0):
            for w_prev in (0.0, 0.5, 1.0):
                mp = surr.mixture_at(w_curr, w_prev)
                mass = np.trapezoid(mixture_pdf(mp, grid), grid)
                assert abs(mass - 1.0) < 1e-3

    def test_non_finite_loss_raises_with_history(self):
        # the density floor keeps the NLL finite under exploding weights, so
        # the divergence guard is exercised by poisoned observations
        pairs = generate_pairs(np.random.default_rng(2), S1, 600)
        pairs[7] = ChannelPair(0.5, 0.5, float("nan"))
        with pytest.raises(TrainingDivergedError) as info:
            fit_channel(np.random.default_rng(3), S1,
                        FitConfig(max_epochs=5), pairs=pairs)
        assert isinstance(info.value.history, dict)
