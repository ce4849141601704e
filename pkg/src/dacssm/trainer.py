"""Joint optimization of the state-space model, reward head, and discriminators.

Gradient routing per training step:

1. The model descends  L_RSSM + L_r - lambda * L_Dd,  where L_Dd is the domain
   discriminator's cross-entropy.  The confusion term -lambda*L_Dd is
   differentiated through the contexts h into the encoder and transition, but
   the discriminator's own parameters are excluded from this update.
2. The domain discriminator descends L_Dd on detached contexts.
3. The optimality discriminator descends its cross-entropy on detached
   (h, a) pairs; none of its gradient reaches the model.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import adversaries
from .adversaries import Discriminator
from .checkpoint import load_arrays, save_arrays
from .data import ChunkBatch, ReplayBufferTriple, sample_chunks
from .planner import CEMConfig, mpc_act
from .ssm import SSMConfig, StateSpaceModel, elbo_loss, gaussian_nll, rollout_posterior


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1.0             # domain confusion coefficient
    batch_chunks: int = 40       # B, split into thirds across the buffers
    chunk_len: int = 40          # L
    lr_model: float = 1e-3
    lr_disc: float = 1e-4
    grad_clip: float = 100.0
    steps_per_episode: int = 100
    episode_budget: int = 200
    seed_episodes: int = 5       # random-policy episodes before training
    explore_std: float = 0.3
    checkpoint_every: int = 50   # episodes
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_chunks < 1 or self.chunk_len < 1:
            raise ValueError("batch_chunks and chunk_len must be >= 1")


@dataclass
class TrainMetrics:
    step: int
    episode: int
    l_rssm: float
    recon: float
    kl: float
    l_r: float
    l_dd: float        # domain-discriminator cross-entropy (descended)
    l_do: float        # optimality-discriminator cross-entropy (descended)
    l_dac: float       # l_rssm - lambda * l_dd
    acc_domain: float
    acc_opt: float
    wall_clock: float

    def to_row(self) -> dict:
        # wall_clock is kept out of the persisted log so that seeded runs
        # produce byte-identical metrics files
        row = asdict(self)
        row.pop("wall_clock")
        return row


@dataclass
class TrainState:
    model: StateSpaceModel
    d_domain: Discriminator
    d_optimality: Discriminator
    opt_model: torch.optim.Optimizer
    opt_d_domain: torch.optim.Optimizer
    opt_d_optimality: torch.optim.Optimizer
    ssm_cfg: SSMConfig
    cfg: TrainConfig
    step: int = 0
    episode: int = 0


def make_train_state(ssm_cfg: SSMConfig, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = StateSpaceModel(ssm_cfg)
    d_domain = adversaries.make_domain_discriminator(ssm_cfg.context_size)
    d_optimality = adversaries.make_optimality_discriminator(
        ssm_cfg.context_size, ssm_cfg.action_dim)
    return TrainState(
        model=model,
        d_domain=d_domain,
        d_optimality=d_optimality,
        opt_model=torch.optim.Adam(model.parameters(), lr=cfg.lr_model),
        opt_d_domain=torch.optim.Adam(d_domain.parameters(), lr=cfg.lr_disc),
        opt_d_optimality=torch.optim.Adam(d_optimality.parameters(), lr=cfg.lr_disc),
        ssm_cfg=ssm_cfg,
        cfg=cfg,
    )


def batch_split(total: int) -> tuple[int, int, int]:
    """Equal thirds (agent, expert, novice); remainder goes agent then expert."""
    base = total // 3
    rem = total - 3 * base
    return base + (1 if rem >= 1 else 0), base + (1 if rem >= 2 else 0), base


def reward_loss(model: StateSpaceModel, batch: ChunkBatch,
                generator: torch.Generator | None = None,
                beliefs=None) -> torch.Tensor:
    """Mean unit-variance Gaussian NLL of the stored rewards along the
    posterior filtering pass."""
    if batch.rewards is None:
        raise ValueError("batch has no rewards")
    if beliefs is None:
        beliefs = rollout_posterior(model, batch.observations, batch.actions,
                                    batch.domains, generator)
    p = next(model.parameters())
    targets = torch.as_tensor(batch.rewards, dtype=p.dtype, device=p.device)
    total = 0.0
    for t, b in enumerate(beliefs):
        mean = model.predict_reward(b.h, b.s).mean
        total = total + gaussian_nll(mean, targets[:, t]).mean()
    return total / len(beliefs)


def _stack_contexts(beliefs) -> torch.Tensor:
    return torch.cat([b.h for b in beliefs], 0)  # (B*L, context)


def _stack_actions(batch: ChunkBatch, like: torch.Tensor) -> torch.Tensor:
    a = torch.as_tensor(batch.actions, dtype=like.dtype, device=like.device)
    return a.transpose(0, 1).reshape(-1, a.shape[-1])  # time-major to match contexts


def state_space_losses(model: StateSpaceModel, d_domain: Discriminator,
                       batches: dict[str, ChunkBatch],
                       torch_gen: torch.Generator | None = None) -> dict:
    """Phase-1 objective pieces on a {agent, expert, novice} batch dict.

    Returns l_rssm, l_r, the domain cross-entropy l_dd evaluated through the
    live contexts, the contexts themselves, and scalar diagnostics.  The DAC
    objective at coefficient lam is  l_rssm - lam * l_dd.
    """
    sizes = {name: b.batch_size for name, b in batches.items()}
    total_n = sum(sizes.values())
    l_rssm = 0.0
    recon_v = kl_v = 0.0
    l_r = 0.0
    contexts = {}
    for name, batch in batches.items():
        loss, parts = elbo_loss(model, batch, torch_gen)
        w = sizes[name] / total_n
        l_rssm = l_rssm + w * loss
        recon_v += w * float(parts["recon"].detach())
        kl_v += w * float(parts["kl"].detach())
        l_r = l_r + w * reward_loss(model, batch, beliefs=parts["beliefs"])
        contexts[name] = _stack_contexts(parts["beliefs"])
    d_vals = {name: d_domain(h) for name, h in contexts.items()}
    l_dd = adversaries.domain_disc_training_loss(
        d_vals["agent"], d_vals["expert"], d_vals["novice"])
    return {"l_rssm": l_rssm, "l_r": l_r, "l_dd": l_dd, "contexts": contexts,
            "recon": recon_v, "kl": kl_v}


def dac_loss(model: StateSpaceModel, d_domain: Discriminator,
             batches: dict[str, ChunkBatch], lam: float,
             torch_gen: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    parts = state_space_losses(model, d_domain, batches, torch_gen)
    return parts["l_rssm"] - lam * parts["l_dd"], parts


def _trainable(module) -> bool:
    return any(p.requires_grad for p in module.parameters())


def train_step(state: TrainState, buffers: ReplayBufferTriple,
               np_rng: np.random.Generator,
               torch_gen: torch.Generator) -> TrainMetrics:
    t0 = time.perf_counter()
    cfg = state.cfg
    model = state.model
    n_a, n_e, n_n = batch_split(cfg.batch_chunks)
    batches = {
        "agent": sample_chunks(buffers.agent, n_a, cfg.chunk_len, np_rng),
        "expert": sample_chunks(buffers.expert, n_e, cfg.chunk_len, np_rng),
        "novice": sample_chunks(buffers.novice, n_n, cfg.chunk_len, np_rng),
    }

    # ---- phase 1: model + reward update with the confusion term ----------
    state.opt_model.zero_grad(set_to_none=True)
    parts = state_space_losses(model, state.d_domain, batches, torch_gen)
    l_rssm, l_r, l_dd_conf = parts["l_rssm"], parts["l_r"], parts["l_dd"]
    contexts = parts["contexts"]
    total = l_rssm + l_r - cfg.lam * l_dd_conf
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: rssm={float(l_rssm)} "
            f"r={float(l_r)} dd={float(l_dd_conf)}")
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.opt_model.step()

    # ---- phase 2: domain discriminator on detached contexts ---------------
    det = {name: h.detach() for name, h in contexts.items()}
    state.opt_d_domain.zero_grad(set_to_none=True)
    d2 = {name: state.d_domain(h) for name, h in det.items()}
    l_dd = adversaries.domain_disc_training_loss(
        d2["agent"], d2["expert"], d2["novice"], counter=state.d_domain)
    if _trainable(state.d_domain):
        l_dd.backward()
        state.opt_d_domain.step()

    # ---- phase 3: optimality discriminator on detached (h, a) pairs -------
    acts = {name: _stack_actions(batches[name], det[name]) for name in batches}
    state.opt_d_optimality.zero_grad(set_to_none=True)
    d3 = {name: state.d_optimality(det[name], acts[name]) for name in batches}
    l_do = adversaries.optimality_disc_training_loss(
        d3["agent"], d3["expert"], d3["novice"], counter=state.d_optimality)
    if _trainable(state.d_optimality):
        l_do.backward()
        state.opt_d_optimality.step()

    with torch.no_grad():
        acc_domain = float(torch.cat([
            (d2["agent"] > 0.5).float(), (d2["expert"] <= 0.5).float(),
            (d2["novice"] <= 0.5).float()]).mean())
        acc_opt = float(torch.cat([
            (d3["expert"] > 0.5).float(), (d3["agent"] <= 0.5).float(),
            (d3["novice"] <= 0.5).float()]).mean())

    state.step += 1
    l_dd_f = float(l_dd.detach())
    return TrainMetrics(
        step=state.step,
        episode=state.episode,
        l_rssm=float(l_rssm.detach()),
        recon=parts["recon"],
        kl=parts["kl"],
        l_r=float(l_r.detach()),
        l_dd=l_dd_f,
        l_do=float(l_do.detach()),
        l_dac=float(l_rssm.detach()) - cfg.lam * l_dd_f,
        acc_domain=acc_domain,
        acc_opt=acc_opt,
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_MODULES = ("model", "d_domain", "d_optimality")
_OPTS = ("opt_model", "opt_d_domain", "opt_d_optimality")


def save_checkpoint(state: TrainState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for mod_name in _MODULES:
        sd = getattr(state, mod_name).state_dict()
        for k, v in sd.items():
            arrays[f"{mod_name}/{k}"] = v.detach().cpu().numpy()
    opt_meta = {}
    for opt_name in _OPTS:
        opt = getattr(state, opt_name)
        sd = opt.state_dict()
        steps = {}
        for idx, st in sd["state"].items():
            for k, v in st.items():
                if k == "step":
                    steps[str(idx)] = float(v)
                else:
                    arrays[f"{opt_name}/{idx}/{k}"] = v.detach().cpu().numpy()
        opt_meta[opt_name] = {"steps": steps, "param_groups": sd["param_groups"]}
    meta = {
        "ssm_cfg": asdict(state.ssm_cfg),
        "train_cfg": asdict(state.cfg),
        "step": state.step,
        "episode": state.episode,
        "optimizers": opt_meta,
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = load_arrays(path)
    ssm_cfg = SSMConfig(**meta["ssm_cfg"])
    cfg = TrainConfig(**meta["train_cfg"])
    state = make_train_state(ssm_cfg, cfg)
    for mod_name in _MODULES:
        mod = getattr(state, mod_name)
        prefix = f"{mod_name}/"
        sd = {k[len(prefix):]: torch.as_tensor(v.copy())
              for k, v in arrays.items() if k.startswith(prefix)}
        mod.load_state_dict(sd)
    for opt_name in _OPTS:
        opt = getattr(state, opt_name)
        info = meta["optimizers"][opt_name]
        opt_state = {}
        for idx_s, step_v in info["steps"].items():
            idx = int(idx_s)
            entry = {"step": torch.tensor(step_v)}
            prefix = f"{opt_name}/{idx}/"
            for k, v in arrays.items():
                if k.startswith(prefix):
                    entry[k[len(prefix):]] = torch.as_tensor(v.copy())
            opt_state[idx] = entry
        opt.load_state_dict({"state": opt_state, "param_groups": info["param_groups"]})
    state.step = meta["step"]
    state.episode = meta["episode"]
    return state


# ---------------------------------------------------------------------------
# Training loop: alternate data collection and gradient steps
# ---------------------------------------------------------------------------

def _random_policy_episode(env, action_dim: int, rng: np.random.Generator, seed: int):
    from .data import AGENT_DOMAIN, DomainLabel, Episode, OptimalityTag

    obs = env.reset(seed)
    observations, actions, rewards = [], [], []
    done = False
    while not done:
        a = rng.uniform(-1.0, 1.0, size=action_dim).astype(np.float32)
        nxt, r, done = env.step(a)
        observations.append(obs)
        actions.append(a)
        rewards.append(r)
        obs = nxt
    return Episode(np.stack(observations), np.stack(actions),
                   np.asarray(rewards, dtype=np.float32),
                   DomainLabel(AGENT_DOMAIN), OptimalityTag.AGENT, seed)


def training_loop(state: TrainState, env, buffers: ReplayBufferTriple,
                  cem_cfg: CEMConfig, out_dir, metrics_name: str = "metrics.jsonl",
                  on_episode=None) -> Path:
    """Alternate one collected agent episode with C gradient steps.

    Returns the path of the final checkpoint.  Fully reproducible given
    cfg.seed: all randomness flows from one seed sequence.
    """
    cfg = state.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / metrics_name

    seq = np.random.SeedSequence(cfg.seed)
    s_sample, s_noise, s_plan, s_env = (int(s) for s in seq.generate_state(4))
    np_rng = np.random.default_rng(s_sample)
    noise_rng = np.random.default_rng(s_noise)
    torch_gen = torch.Generator().manual_seed(s_plan)
    env_seeds = np.random.SeedSequence(s_env).generate_state(
        cfg.seed_episodes + cfg.episode_budget)

    if len(buffers.agent) == 0:
        for i in range(cfg.seed_episodes):
            buffers.agent.append(_random_policy_episode(
                env, env.action_dim, noise_rng, int(env_seeds[i])))

    final_path = out / "ckpt-final.dacw"
    with open(metrics_path, "a") as mf:
        for ep in range(cfg.episode_budget):
            episode = mpc_act(env, state.model, state.d_optimality, cem_cfg,
                              torch_gen, explore_std=cfg.explore_std,
                              noise_rng=noise_rng,
                              seed=int(env_seeds[cfg.seed_episodes + ep]))
            buffers.agent.append(episode)
            state.episode += 1
            for _ in range(cfg.steps_per_episode):
                try:
                    metrics = train_step(state, buffers, np_rng, torch_gen)
                except NonFiniteLossError:
                    save_checkpoint(state, out / "ckpt-abort.dacw")
                    raise
                mf.write(json.dumps(metrics.to_row(), sort_keys=True) + "\n")
            mf.flush()
            if on_episode is not None:
                on_episode(state, episode)
            if cfg.checkpoint_every and state.episode % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt-{state.episode:05d}.dacw")
    save_checkpoint(state, final_path)
    return final_path
