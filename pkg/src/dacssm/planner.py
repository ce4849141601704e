"""Cross-entropy-method model-predictive control in latent space.

Candidates are whole action sequences scored by rolling the latent dynamics
open-loop (prior means by default) and accumulating predicted task reward
and/or the optimality discriminator's log-probability.  Planning never
touches images: the observation decoder is not invoked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .adversaries import EPS_LOG, Discriminator
from .ssm import StateSpaceModel

REWARD_MODES = ("task", "imitation", "dual")


@dataclass
class CEMConfig:
    horizon: int = 3
    iterations: int = 10
    candidates: int = 4000
    elites: int = 20
    reward_mode: str = "dual"
    w_task: float = 10.0   # dual-mode weights, applied as raw multipliers
    w_imit: float = 1.0
    action_low: float = -1.0
    action_high: float = 1.0
    std_floor: float = 0.01       # refit std floor against premature collapse
    use_sample_propagation: bool = False  # prior samples instead of means
    action_bias: tuple | None = None      # constant per-step offset (task prior)

    def __post_init__(self):
        if self.elites > self.candidates:
            raise ValueError("elites must be <= candidates")
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be >= 1")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")

    def weights(self) -> tuple[float, float]:
        if self.reward_mode == "task":
            return 1.0, 0.0
        if self.reward_mode == "imitation":
            return 0.0, 1.0
        return self.w_task, self.w_imit


@dataclass
class PlanResult:
    actions: np.ndarray             # (H, A) final plan
    objective: float                # best score seen over all iterations
    elite_means: list = field(default_factory=list)  # per-iteration (H, A)
    elite_stds: list = field(default_factory=list)
    best_history: list = field(default_factory=list)  # best-so-far per iteration


def task_optimality(model: StateSpaceModel, h, s) -> torch.Tensor:
    """ln p(task-optimal | h, s) = expected reward."""
    return model.predict_reward(h, s).mean


def imitation_optimality(disc: Discriminator, h, a) -> torch.Tensor:
    """ln p(imitation-optimal | h, a) = ln D_O(h, a), clamped below at ln eps."""
    return torch.log(disc(h, a).clamp(EPS_LOG, 1.0))


def score_candidates(model: StateSpaceModel, disc: Discriminator | None,
                     h0: torch.Tensor, s0: torch.Tensor,
                     candidates: torch.Tensor, cfg: CEMConfig,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Score (J, H, A) candidate sequences from the belief (h0, s0).

    Each candidate gets sum_t [w_task * E[r_t] + w_imit * ln D_O(h_t, a_t)]
    with latents propagated open-loop through the prior.
    """
    if (candidates < cfg.action_low).any() or (candidates > cfg.action_high).any():
        raise ValueError("candidate actions out of bounds")
    w_task, w_imit = cfg.weights()
    if w_imit != 0.0 and disc is None:
        raise ValueError("imitation scoring requires the optimality discriminator")
    J = candidates.shape[0]
    h = h0.expand(J, -1) if h0.shape[0] == 1 else h0
    s = s0.expand(J, -1) if s0.shape[0] == 1 else s0
    scores = torch.zeros(J, dtype=h.dtype, device=h.device)
    for t in range(candidates.shape[1]):
        a = candidates[:, t]
        h = model.transition_step(h, s, a)
        prior = model.prior_state(h)
        s = prior.sample(generator) if cfg.use_sample_propagation else prior.mean
        if w_task != 0.0:
            scores = scores + w_task * task_optimality(model, h, s)
        if w_imit != 0.0:
            scores = scores + w_imit * imitation_optimality(disc, h, a)
    return scores


def cem_plan(model: StateSpaceModel, disc: Discriminator | None,
             h0: torch.Tensor, s0: torch.Tensor, cfg: CEMConfig,
             generator: torch.Generator,
             score_fn=None) -> PlanResult:
    """Iteratively refit a diagonal Gaussian over action sequences to its elites.

    The distribution starts at mean 0, std 1; samples are clipped to the
    action bounds.  `score_fn(candidates) -> (J,) scores` may replace the
    model-based scorer (used by oracle tests).
    """
    p = next(model.parameters())
    A = model.cfg.action_dim
    mean = torch.zeros(cfg.horizon, A, dtype=p.dtype, device=p.device)
    std = torch.ones_like(mean)
    if cfg.action_bias is not None:
        mean = mean + torch.as_tensor(cfg.action_bias, dtype=p.dtype).reshape(1, A)

    result = PlanResult(actions=None, objective=-np.inf)
    with torch.no_grad():
        for _ in range(cfg.iterations):
            eps = torch.randn(cfg.candidates, cfg.horizon, A, generator=generator,
                              dtype=p.dtype, device=p.device)
            cand = (mean + std * eps).clamp(cfg.action_low, cfg.action_high)
            if score_fn is not None:
                scores = score_fn(cand)
            else:
                scores = score_candidates(model, disc, h0, s0, cand, cfg, generator)
            top = torch.topk(scores, cfg.elites)
            elite = cand[top.indices]
            mean = elite.mean(0)
            std = elite.std(0, unbiased=False).clamp_min(cfg.std_floor)
            best = float(top.values[0])
            if best > result.objective:
                result.objective = best
            result.elite_means.append(mean.cpu().numpy().copy())
            result.elite_stds.append(std.cpu().numpy().copy())
            result.best_history.append(result.objective)
    result.actions = mean.clamp(cfg.action_low, cfg.action_high).cpu().numpy()
    return result


def mpc_act(env, model: StateSpaceModel, disc: Discriminator | None,
            cfg: CEMConfig, generator: torch.Generator,
            explore_std: float = 0.0, noise_rng: np.random.Generator | None = None,
            seed: int = 0):
    """Run one closed-loop episode: filter the belief, replan every step,
    execute the first planned action (plus optional exploration noise).

    Returns a completed agent-domain Episode at control-step granularity.
    """
    from .data import AGENT_DOMAIN, DomainLabel, Episode, OptimalityTag

    obs = env.reset(seed)
    h, s = model.initial_state(1)
    p = next(model.parameters())
    a_prev = torch.zeros(1, model.cfg.action_dim, dtype=p.dtype, device=p.device)
    label = DomainLabel(AGENT_DOMAIN, model.cfg.num_domains)

    observations, actions, rewards = [], [], []
    done = False
    with torch.no_grad():
        while not done:
            h = model.transition_step(h, s, a_prev)
            post = model.posterior_state(h, model.prepare_obs(obs[None]), label.one_hot)
            s = post.mean
            plan = cem_plan(model, disc, h, s, cfg, generator)
            action = plan.actions[0]
            if explore_std > 0.0:
                action = action + noise_rng.normal(0.0, explore_std, size=action.shape)
            action = np.clip(action, cfg.action_low, cfg.action_high).astype(np.float32)

            next_obs, reward, done = env.step(action)
            observations.append(obs)
            actions.append(action)
            rewards.append(reward)
            a_prev = torch.as_tensor(action, dtype=p.dtype).unsqueeze(0)
            obs = next_obs

    return Episode(
        observations=np.stack(observations),
        actions=np.stack(actions),
        rewards=np.asarray(rewards, dtype=np.float32),
        domain=label,
        optimality_tag=OptimalityTag.AGENT,
        seed=seed,
    )
