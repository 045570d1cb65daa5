from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedvi.bounds import (
    PacBayesConfig,
    bound_holds_check,
    elbo_components,
    estimate_slack,
    generator_prior,
    pacbayes_rhs,
    scaled_log_moment,
    synthetic_task,
)
from fedvi.datagen import GenConfig
from fedvi.federation import TrainConfig, iter_local_batches, run_training
from fedvi.model import init_params, minibatch_loss
from fedvi.seeding import DOMAIN_CLIENT, substream

from conftest import small_arch


def toy_task(c=4, n=(30, 40), d=4, k=3, seed=17, holdout=0, sigma_beta=1.0):
    cfg = GenConfig(
        c=c, n_range=n, d=d, num_classes=k, sigma_beta=sigma_beta,
        input_shift_scale=0.5, seed=seed, holdout_count=holdout,
    )
    return synthetic_task(cfg)


def toy_train_cfg(**overrides) -> TrainConfig:
    base = dict(
        rounds=3,
        cohort_size=3,
        client_lr=0.0,
        server_lr=1.0,
        server_momentum=0.0,
        local_epochs=1,
        batch_size=12,
        tau=0.25,
        seed=5,
        eval_every=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestElboComponents:
    def test_single_client_single_batch_matches_loss_parts(self, rng):
        ds, _ = toy_task()
        arch = small_arch(input_dim=4)
        params = init_params(arch, rng)
        client = ds.clients[0]
        cfg = toy_train_cfg(batch_size=1024)  # everything in one batch
        report = elbo_components(params, [client], cfg, round_index=1)

        stream = substream(cfg.seed, DOMAIN_CLIENT, 1, client.client_id)
        batches = list(iter_local_batches(client, cfg, arch, stream))
        assert len(batches) == 1
        xb, yb, noise = batches[0]
        loss, parts = minibatch_loss(params, xb, yb, cfg.tau, noise, training=True)
        assert report.expected_loss == parts.nll
        assert report.local_regs[client.client_id] == parts.kl / xb.shape[0]
        assert report.total == loss.item()

    def test_zero_weights_collapse_total_to_expected_loss(self, rng):
        ds, _ = toy_task()
        params = init_params(small_arch(input_dim=4), rng)
        cfg = toy_train_cfg(tau=0.0)
        report = elbo_components(params, ds.clients[:2], cfg, round_index=1)
        assert report.total == report.expected_loss
        assert report.global_reg == 0.0

    def test_decomposition_identity_multi_client(self, rng):
        ds, _ = toy_task()
        params = init_params(small_arch(input_dim=4), rng)
        cfg = toy_train_cfg(tau=0.8, batch_size=8)
        report = elbo_components(params, ds.clients, cfg, round_index=2)
        report.check_identity(cfg.tau, cfg.gamma, tol=1e-10)

    def test_matches_frozen_training_accumulation(self):
        # with a zero client learning rate the training loop evaluates the
        # same losses this evaluator replays, round by round
        ds, _ = toy_task()
        arch = small_arch(input_dim=4)
        cfg = toy_train_cfg(client_lr=0.0, rounds=3, cohort_size=3, batch_size=8)
        result = run_training(cfg, arch, ds)
        params = init_params(arch, substream(cfg.seed, 1))
        by_id = {c.client_id: c for c in ds.clients}

        accumulated = sum(r.loss_sum for r in result.reports)
        replayed = 0.0
        for report in result.reports:
            cohort = [by_id[cid] for cid in report.cohort]
            replayed += elbo_components(params, cohort, cfg, report.round_index).total
        assert abs(accumulated - replayed) < 1e-10

    def test_rejects_non_fedvi_objective(self, rng):
        ds, _ = toy_task()
        params = init_params(small_arch(input_dim=4), rng)
        with pytest.raises(ValueError):
            elbo_components(params, ds.clients, toy_train_cfg(algorithm="fedavg"), 1)


class TestPacBayesRhs:
    def test_collapses_to_empirical_risk(self):
        assert pacbayes_rhs(1.25, 0.0, eta=3.0, delta=1.0, slack=0.0) == 1.25

    def test_arithmetic(self):
        got = pacbayes_rhs(0.5, kl=2.0, eta=4.0, delta=0.05, slack=0.0)
        assert abs(got - (0.5 + (2.0 + math.log(20.0)) / 4.0)) < 1e-12

    @given(
        eta1=st.floats(0.1, 50),
        eta2=st.floats(0.1, 50),
        kl=st.floats(0, 10),
        slack=st.floats(0, 10),
        delta=st.floats(0.01, 1.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_eta_kl_slack_delta(self, eta1, eta2, kl, slack, delta):
        lo, hi = sorted([eta1, eta2])
        assert pacbayes_rhs(1.0, kl, hi, delta, slack) <= pacbayes_rhs(
            1.0, kl, lo, delta, slack
        ) + 1e-12
        assert pacbayes_rhs(1.0, kl + 1, lo, delta, slack) >= pacbayes_rhs(
            1.0, kl, lo, delta, slack
        )
        assert pacbayes_rhs(1.0, kl, lo, delta, slack + 1) >= pacbayes_rhs(
            1.0, kl, lo, delta, slack
        )
        assert pacbayes_rhs(1.0, kl, lo, delta / 2, slack) >= pacbayes_rhs(
            1.0, kl, lo, delta, slack
        )

    def test_large_eta_approaches_empirical_risk_from_above(self):
        values = [pacbayes_rhs(2.0, 1.0, eta, 0.5, 0.3) for eta in (1, 10, 100, 1000)]
        assert all(v >= 2.0 for v in values)
        assert values == sorted(values, reverse=True)

    def test_rejects_bad_eta_delta(self):
        with pytest.raises(ValueError):
            pacbayes_rhs(0.0, 0.0, eta=0.0, delta=0.5, slack=0.0)
        with pytest.raises(ValueError):
            pacbayes_rhs(0.0, 0.0, eta=1.0, delta=0.0, slack=0.0)


class TestScaledLogMoment:
    def test_zero_gaps_give_exactly_log_inv_delta(self):
        for delta in (1.0, 0.25, 0.05):
            got = scaled_log_moment(np.zeros(1000), delta)
            assert got == math.log(1.0 / delta)

    def test_infinite_gap_warns_and_returns_inf(self):
        with pytest.warns(RuntimeWarning, match="heavy-tailed"):
            out = scaled_log_moment(np.array([0.0, math.inf]), 0.1)
        assert out == math.inf

    def test_no_overflow_for_huge_gaps(self):
        out = scaled_log_moment(np.array([5000.0, 4000.0]), 0.5)
        assert math.isfinite(out)
        assert abs(out - (math.log(2.0) + 5000.0 + math.log(0.5 * (1 + math.exp(-1000))))) < 1e-9


class TestEstimateSlack:
    def test_eta_zero_limit_is_log_inv_delta(self):
        ds, task = toy_task()
        rng = substream(33, 0)
        got = estimate_slack(task, generator_prior(task), 1e-12, 0.1, 20, 20, rng)
        assert abs(got - math.log(10.0)) < 1e-6

    def test_estimate_is_finite_and_stable_under_more_samples(self):
        ds, task = toy_task(c=4, n=(200, 200), d=4, k=3, seed=9)
        a = estimate_slack(task, generator_prior(task), 1.0, 0.1, 150, 150, substream(1, 0))
        b = estimate_slack(task, generator_prior(task), 1.0, 0.1, 300, 300, substream(2, 0))
        assert math.isfinite(a) and math.isfinite(b)
        assert abs(a - b) / abs(b) < 0.10

    def test_prior_dimension_checked(self):
        ds, task = toy_task()
        from fedvi.distributions import standard_prior

        with pytest.raises(ValueError):
            estimate_slack(task, standard_prior(3, 1.0), 1.0, 0.1, 5, 5, substream(0, 0))


class TestBoundHoldsCheck:
    def _trained(self, task_seed=17):
        ds, task = toy_task(c=4, n=(60, 80), d=4, k=3, seed=task_seed)
        arch = small_arch(input_dim=4)
        cfg = toy_train_cfg(client_lr=0.002, rounds=5, cohort_size=3, batch_size=16)
        result = run_training(cfg, arch, ds)
        return task, result.state.params

    def test_zero_trials_is_vacuously_one(self):
        task, params = self._trained()
        pb = PacBayesConfig(eta=1.0, delta=0.1, slack_samples=10, posterior_samples=4)
        res = bound_holds_check(task, params, pb, 0, substream(4, 0), slack=1.0)
        assert res.holding_fraction == 1.0

    def test_overestimated_slack_never_lowers_the_fraction(self):
        task, params = self._trained()
        pb = PacBayesConfig(eta=1.0, delta=0.1, slack_samples=10, posterior_samples=4)
        base = bound_holds_check(task, params, pb, 5, substream(4, 1), slack=5.0)
        bumped = bound_holds_check(task, params, pb, 5, substream(4, 1), slack=15.0)
        assert bumped.holding_fraction >= base.holding_fraction
        assert [a <= b for a, b in zip(base.rhs_values, bumped.rhs_values)]

    def test_details_align_with_rhs(self):
        task, params = self._trained()
        pb = PacBayesConfig(eta=2.0, delta=0.2, slack_samples=10, posterior_samples=4)
        res = bound_holds_check(task, params, pb, 3, substream(4, 2), slack=7.0)
        for rhs, emp, kl in zip(res.rhs_values, res.empirical_risks, res.kl_values):
            want = pacbayes_rhs(emp, kl, pb.eta, pb.delta, 7.0 - math.log(1 / pb.delta))
            assert abs(rhs - want) < 1e-10
