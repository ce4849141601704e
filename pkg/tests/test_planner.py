import math

import numpy as np
import pytest
import torch

from conftest import make_micro_model
from dacssm.adversaries import make_optimality_discriminator
from dacssm.envworld import ControlEnv, EnvSpec, shift_preset
from dacssm.planner import (
    CEMConfig,
    cem_plan,
    imitation_optimality,
    mpc_act,
    score_candidates,
    task_optimality,
)


class TestConfig:
    def test_defaults_match_planning_hyperparameters(self):
        cfg = CEMConfig()
        assert (cfg.horizon, cfg.iterations, cfg.candidates, cfg.elites) == (3, 10, 4000, 20)
        assert (cfg.w_task, cfg.w_imit) == (10.0, 1.0)

    def test_elites_must_not_exceed_candidates(self):
        with pytest.raises(ValueError):
            CEMConfig(candidates=10, elites=20)

    def test_mode_weights(self):
        assert CEMConfig(reward_mode="task").weights() == (1.0, 0.0)
        assert CEMConfig(reward_mode="imitation").weights() == (0.0, 1.0)
        assert CEMConfig(reward_mode="dual").weights() == (10.0, 1.0)


class TestOptimalities:
    def test_task_optimality_is_reward_mean(self):
        model = make_micro_model()
        h = torch.randn(3, 8, dtype=torch.float64)
        s = torch.randn(3, 4, dtype=torch.float64)
        assert torch.equal(task_optimality(model, h, s),
                           model.predict_reward(h, s).mean)
        # zero-initialized head gives exactly zero
        assert torch.equal(task_optimality(model, h, s), torch.zeros(3, dtype=torch.float64))

    def test_imitation_optimality_closed_forms(self):
        class Stub:
            def __init__(self, v):
                self.v = v

            def __call__(self, h, a):
                return torch.full((h.shape[0],), self.v, dtype=torch.float64)

        h = torch.zeros(2, 8)
        a = torch.zeros(2, 2)
        assert float(imitation_optimality(Stub(1.0), h, a)[0]) == 0.0
        assert abs(float(imitation_optimality(Stub(0.5), h, a)[0]) - math.log(0.5)) < 1e-12
        # saturation clamps at ln(eps)
        assert abs(float(imitation_optimality(Stub(0.0), h, a)[0]) - math.log(1e-6)) < 1e-9


class TestScoring:
    def setup_method(self):
        self.model = make_micro_model()
        torch.manual_seed(0)
        self.disc = make_optimality_discriminator(8, 2).double()
        with torch.no_grad():
            self.disc.net[-1].weight.normal_(0, 0.5)
        self.h0, self.s0 = self.model.initial_state(1)

    def test_single_step_task_score_is_reward_mean(self):
        cand = torch.zeros(5, 1, 2, dtype=torch.float64)
        cfg = CEMConfig(horizon=1, reward_mode="task")
        scores = score_candidates(self.model, None, self.h0, self.s0, cand, cfg)
        h = self.model.transition_step(self.h0.expand(5, -1), self.s0.expand(5, -1),
                                       cand[:, 0])
        s = self.model.prior_state(h).mean
        assert torch.allclose(scores, self.model.predict_reward(h, s).mean)

    def test_identical_candidates_identical_scores(self):
        cand = torch.rand(1, 3, 2, dtype=torch.float64).repeat(4, 1, 1) * 0.5
        cfg = CEMConfig(reward_mode="dual")
        scores = score_candidates(self.model, self.disc, self.h0, self.s0, cand, cfg)
        assert torch.equal(scores, scores[0].expand(4))

    def test_dual_is_weighted_sum_of_modes(self):
        torch.manual_seed(1)
        cand = (torch.rand(6, 3, 2, dtype=torch.float64) - 0.5)
        t = score_candidates(self.model, self.disc, self.h0, self.s0, cand,
                             CEMConfig(reward_mode="task"))
        i = score_candidates(self.model, self.disc, self.h0, self.s0, cand,
                             CEMConfig(reward_mode="imitation"))
        d = score_candidates(self.model, self.disc, self.h0, self.s0, cand,
                             CEMConfig(reward_mode="dual"))
        assert torch.allclose(d, 10.0 * t + 1.0 * i, atol=1e-10)

    def test_out_of_bounds_candidates_rejected(self):
        cand = torch.full((2, 3, 2), 1.5, dtype=torch.float64)
        with pytest.raises(ValueError):
            score_candidates(self.model, self.disc, self.h0, self.s0, cand,
                             CEMConfig(reward_mode="task"))

    def test_score_independent_of_other_candidates(self):
        torch.manual_seed(2)
        cand = (torch.rand(8, 3, 2, dtype=torch.float64) - 0.5)
        cfg = CEMConfig(reward_mode="dual")
        full = score_candidates(self.model, self.disc, self.h0, self.s0, cand, cfg)
        solo = score_candidates(self.model, self.disc, self.h0, self.s0, cand[3:4], cfg)
        assert torch.allclose(full[3], solo[0])


class TestCEM:
    def test_quadratic_objective_matches_grid_search(self):
        model = make_micro_model()
        target = torch.tensor([0.3, -0.5], dtype=torch.float64)

        def score_fn(cand):
            return -((cand - target) ** 2).sum((1, 2))

        # independent per-component objective: the grid-search oracle reduces
        # to a dense 1-D scan per component
        grid = torch.linspace(-1, 1, 2001, dtype=torch.float64)
        oracle = torch.stack([grid[(-(grid - t) ** 2).argmax()] for t in target])

        cfg = CEMConfig(reward_mode="task")
        plan = cem_plan(model, None, *model.initial_state(1), cfg,
                        torch.Generator().manual_seed(0), score_fn=score_fn)
        assert plan.actions.shape == (3, 2)
        for t in range(3):
            assert np.all(np.abs(plan.actions[t] - oracle.numpy()) <= 0.05)

    def test_best_so_far_non_decreasing(self):
        model = make_micro_model()
        torch.manual_seed(3)
        disc = make_optimality_discriminator(8, 2).double()
        cfg = CEMConfig(candidates=100, elites=10, reward_mode="dual")
        plan = cem_plan(model, disc, *model.initial_state(1), cfg,
                        torch.Generator().manual_seed(1))
        hist = plan.best_history
        assert all(b >= a for a, b in zip(hist, hist[1:]))
        assert plan.objective == hist[-1]

    def test_elites_equal_population_refits_to_moments(self):
        model = make_micro_model()
        cfg = CEMConfig(candidates=50, elites=50, iterations=1, reward_mode="task")
        captured = {}

        def score_fn(cand):
            captured["cand"] = cand.clone()
            return torch.arange(50, dtype=torch.float64)

        plan = cem_plan(model, None, *model.initial_state(1), cfg,
                        torch.Generator().manual_seed(4), score_fn=score_fn)
        cand = captured["cand"]
        assert np.allclose(plan.elite_means[0], cand.mean(0).numpy(), atol=1e-12)

    def test_planner_never_decodes(self):
        model = make_micro_model()
        torch.manual_seed(5)
        disc = make_optimality_discriminator(8, 2).double()
        model.decode_calls = 0
        cem_plan(model, disc, *model.initial_state(1),
                 CEMConfig(candidates=64, elites=8),
                 torch.Generator().manual_seed(2))
        assert model.decode_calls == 0


class TestMPC:
    def test_episode_accounting(self):
        spec = EnvSpec(task="point-catch", image_hw=8, horizon=24, action_repeat=2)
        env = ControlEnv(spec, shift_preset("expert"))
        model = make_micro_model(dtype=torch.float32)
        torch.manual_seed(6)
        disc = make_optimality_discriminator(8, 2)
        cfg = CEMConfig(candidates=30, elites=5, iterations=2)
        ep = mpc_act(env, model, disc, cfg, torch.Generator().manual_seed(0),
                     explore_std=0.1, noise_rng=np.random.default_rng(0), seed=11)
        assert len(ep) == spec.control_steps
        assert env.state.tick == spec.control_steps * spec.action_repeat
        assert ep.optimality_tag.value == "agent"
        assert ep.domain.index == 1
        assert np.all(np.abs(ep.actions) <= 1.0)
