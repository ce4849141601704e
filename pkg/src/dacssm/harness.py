"""Run configuration, evaluation protocol, and diagnostics.

Everything downstream of training lives here: percentile-based return
evaluation, per-step imitation-reward traces, label-swap reconstruction with
a label-free probe decoder, linear domain probing of the contexts, and the
confusion-coefficient sweep.  All diagnostics treat the trained model as
frozen; none of them ever update its parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .adversaries import EPS_LOG
from .data import (
    AGENT_DOMAIN,
    EXPERT_DOMAIN,
    Episode,
    EpisodeStore,
    ReplayBufferTriple,
    load_dataset,
)
from .envworld import ControlEnv, EnvSpec, shift_preset
from .planner import CEMConfig, mpc_act
from .ssm import ConvDecoder, SSMConfig, StateSpaceModel
from .trainer import TrainConfig, TrainState, load_checkpoint, make_train_state, training_loop

LAMBDA_SWEEP_DEFAULT = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0)


class ConfigError(ValueError):
    """A run configuration fails validation."""


# ---------------------------------------------------------------------------
# Run configuration: one JSON document with sections mirroring module configs
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    env: EnvSpec
    shift: str                    # preset name, resolved via shift_preset()
    ssm: SSMConfig
    train: TrainConfig
    cem: CEMConfig
    expert_dir: str | None = None
    novice_dir: str | None = None
    out_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        shift_preset(self.shift)  # raises on unknown preset
        if self.ssm.action_dim != self.env.action_dim:
            raise ConfigError(
                f"ssm.action_dim {self.ssm.action_dim} != env action_dim "
                f"{self.env.action_dim}")
        if self.ssm.image_hw != self.env.image_hw:
            raise ConfigError(
                f"ssm.image_hw {self.ssm.image_hw} != env image_hw {self.env.image_hw}")
        for name in ("expert_dir", "novice_dir"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_dir():
                raise ConfigError(f"{name} does not exist: {p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = asdict(self.env)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        env = EnvSpec(**_coerce(d.pop("env", {}), EnvSpec))
        ssm_d = _coerce(d.pop("ssm", {}), SSMConfig)
        ssm_d.setdefault("action_dim", env.action_dim)
        ssm_d.setdefault("image_hw", env.image_hw)
        return cls(
            env=env,
            shift=d.pop("shift", "palette"),
            ssm=SSMConfig(**ssm_d),
            train=TrainConfig(**_coerce(d.pop("train", {}), TrainConfig)),
            cem=CEMConfig(**_coerce(d.pop("cem", {}), CEMConfig)),
            **d,
        )


def _coerce(section: dict, cls) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = dict(section)
    for f in fields(cls):
        if f.name in out and f.type == "tuple | None" and out[f.name] is not None:
            out[f.name] = tuple(out[f.name])
    return out


def apply_overrides(d: dict, overrides) -> dict:
    """Apply dot-path overrides like 'train.lam=3' to a nested config dict.

    Values parse as JSON where possible, else stay strings.
    """
    out = json.loads(json.dumps(d))  # deep copy, JSON-typed
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a leaf")
        node[keys[-1]] = value
    return out


def load_run_config(path, overrides=()) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if overrides:
        d = apply_overrides(d, overrides)
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    cfg.validate()
    return cfg


def make_env(cfg: RunConfig) -> ControlEnv:
    return ControlEnv(cfg.env, shift_preset(cfg.shift))


def load_buffers(cfg: RunConfig, capacity: int = 1000) -> ReplayBufferTriple:
    buffers = ReplayBufferTriple.with_capacity(capacity)
    if cfg.expert_dir:
        buffers.expert = load_dataset(cfg.expert_dir, capacity)
    if cfg.novice_dir:
        buffers.novice = load_dataset(cfg.novice_dir, capacity)
    return buffers


# ---------------------------------------------------------------------------
# Evaluation: percentile protocol over trajectories x seeds
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    reward_mode: str
    n_episodes: int
    seeds: list[int]
    returns_by_seed: dict          # seed -> list of raw returns
    mean: float
    std: float
    p5: float
    p95: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_returns(cls, returns_by_seed: dict, reward_mode: str) -> "EvalReport":
        flat = np.concatenate([np.asarray(v, dtype=np.float64)
                               for v in returns_by_seed.values()])
        return cls(
            reward_mode=reward_mode,
            n_episodes=len(next(iter(returns_by_seed.values()))),
            seeds=sorted(returns_by_seed),
            returns_by_seed={int(k): [float(x) for x in v]
                             for k, v in returns_by_seed.items()},
            mean=float(flat.mean()),
            std=float(flat.std()),
            p5=float(np.percentile(flat, 5)),
            p95=float(np.percentile(flat, 95)),
        )


def evaluate(state: TrainState, env: ControlEnv, cem_cfg: CEMConfig,
             n_episodes: int = 20, seeds=(0, 1, 2, 3)) -> EvalReport:
    """Run noise-free closed-loop episodes and aggregate returns.

    Statistics follow the 5th/95th-percentile convention over all
    trajectories pooled across seeds; the raw returns ship in the report.
    Model parameters are left untouched.
    """
    if env.spec.action_dim != state.ssm_cfg.action_dim:
        raise ConfigError("checkpoint action_dim does not match the environment")
    if env.spec.image_hw != state.ssm_cfg.image_hw:
        raise ConfigError("checkpoint image size does not match the environment")
    disc = state.d_optimality if cem_cfg.weights()[1] != 0.0 else None
    returns_by_seed = {}
    for seed in seeds:
        gen = torch.Generator().manual_seed(seed)
        ep_seeds = np.random.SeedSequence(seed).generate_state(n_episodes)
        rets = []
        for i in range(n_episodes):
            ep = mpc_act(env, state.model, disc, cem_cfg, gen,
                         explore_std=0.0, seed=int(ep_seeds[i]))
            rets.append(float(ep.rewards.sum()))
        returns_by_seed[int(seed)] = rets
    return EvalReport.from_returns(returns_by_seed, cem_cfg.reward_mode)


def write_report(report: EvalReport, out_dir) -> Path:
    """Persist report.json plus a flat returns.csv next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    lines = ["seed,episode,return"]
    for seed in report.seeds:
        for i, r in enumerate(report.returns_by_seed[seed]):
            lines.append(f"{seed},{i},{r}")
    (out / "returns.csv").write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Deterministic posterior filtering shared by the diagnostics
# ---------------------------------------------------------------------------

def filter_contexts(model: StateSpaceModel, episode: Episode,
                    domains=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Filter one episode with posterior means; returns (h, s) of shape (T, ...).

    Uses the episode's stored domain label unless `domains` overrides it.
    Deterministic: no posterior sampling.
    """
    if domains is None:
        domains = episode.domain.one_hot
    obs = model.prepare_obs(episode.observations[None])
    p = next(model.parameters())
    actions = torch.as_tensor(episode.actions, dtype=p.dtype, device=p.device)
    h, s = model.initial_state(1)
    a_prev = torch.zeros(1, model.cfg.action_dim, dtype=p.dtype, device=p.device)
    hs, ss = [], []
    with torch.no_grad():
        for t in range(len(episode)):
            h = model.transition_step(h, s, a_prev)
            s = model.posterior_state(h, obs[:, t], domains).mean
            hs.append(h[0])
            ss.append(s[0])
            a_prev = actions[t:t + 1]
    return torch.stack(hs), torch.stack(ss)


def reward_trace(model: StateSpaceModel, d_optimality, episode: Episode) -> np.ndarray:
    """Per-step imitation reward ln D_O(h_t, a_t) along the filtered episode."""
    h, _ = filter_contexts(model, episode)
    p = next(model.parameters())
    a = torch.as_tensor(episode.actions, dtype=p.dtype, device=p.device)
    with torch.no_grad():
        d = torch.as_tensor(d_optimality(h, a))
        trace = torch.log(d.clamp(EPS_LOG, 1.0))
    return trace.cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Label-swap reconstruction and the label-free probe decoder
# ---------------------------------------------------------------------------

class ProbeDecoder(torch.nn.Module):
    """Decoder from the context h alone: no stochastic state, no domain label."""

    def __init__(self, cfg: SSMConfig):
        super().__init__()
        self.inner = ConvDecoder(replace(cfg, state_size=0, num_domains=0))
        self.context_size = cfg.context_size

    def forward(self, h):
        return self.inner(h)


def train_probe_decoder(model: StateSpaceModel, episodes, steps: int = 200,
                        batch: int = 64, lr: float = 1e-3,
                        seed: int = 0) -> ProbeDecoder:
    """Fit a fresh decoder from frozen contexts to pixels.

    The state-space model is never updated: contexts are computed under
    no_grad and only the probe decoder's parameters receive gradients.
    """
    torch.manual_seed(seed)
    probe = ProbeDecoder(model.cfg).to(next(model.parameters()).dtype)
    feats, targets = [], []
    for ep in episodes:
        h, _ = filter_contexts(model, ep)
        feats.append(h)
        targets.append(model.prepare_obs(ep.observations))
    feats = torch.cat(feats)
    targets = torch.cat(targets)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(0, feats.shape[0], size=batch))
        pred = probe(feats[idx])
        loss = ((pred - targets[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return probe


def label_swap_reconstruction(model: StateSpaceModel, episode: Episode,
                              context_steps: int = 5,
                              probe: ProbeDecoder | None = None) -> dict:
    """Reconstruct an episode under both domain labels (and optionally the
    label-free probe decoder).

    The first `context_steps` frames are filtered through the posterior; the
    remainder rolls the prior open-loop on the episode's actions.  Returns a
    dict of rows, each (T, H, W, C) float in [0, 1]:
    truth, expert, agent, and probe when a probe decoder is given.
    """
    T = len(episode)
    if T <= context_steps:
        raise ValueError(f"episode length {T} must exceed context_steps {context_steps}")
    p = next(model.parameters())
    actions = torch.as_tensor(episode.actions, dtype=p.dtype, device=p.device)
    obs = model.prepare_obs(episode.observations[None])

    rows = {"truth": (episode.observations.astype(np.float64) / 255.0)}
    labels = {
        "expert": np.eye(model.cfg.num_domains, dtype=np.float32)[EXPERT_DOMAIN],
        "agent": np.eye(model.cfg.num_domains, dtype=np.float32)[AGENT_DOMAIN],
    }
    with torch.no_grad():
        for name, one_hot in labels.items():
            h, s = model.initial_state(1)
            a_prev = torch.zeros(1, model.cfg.action_dim, dtype=p.dtype, device=p.device)
            frames, hs = [], []
            for t in range(context_steps):
                h = model.transition_step(h, s, a_prev)
                s = model.posterior_state(h, obs[:, t], one_hot).mean
                frames.append(model.decode_observation(h, s, one_hot)[0])
                hs.append(h[0])
                a_prev = actions[t:t + 1]
            for t in range(context_steps, T):
                h = model.transition_step(h, s, a_prev)
                s = model.prior_state(h).mean
                frames.append(model.decode_observation(h, s, one_hot)[0])
                hs.append(h[0])
                a_prev = actions[t:t + 1]
            rows[name] = torch.stack(frames).clamp(0, 1).cpu().numpy()
            if name == "expert":
                h_seq = torch.stack(hs)
        if probe is not None:
            rows["probe"] = probe(h_seq).clamp(0, 1).cpu().numpy()
    return rows


# ---------------------------------------------------------------------------
# Entity-position extraction: color-agnostic template matching
# ---------------------------------------------------------------------------

def _shape_templates(spec: EnvSpec) -> dict:
    """Binary masks of the known toy shapes at the spec's resolution."""
    u = spec.image_hw / 32.0
    templates = {}
    if spec.task == "point-catch":
        r = 4.0 * u
        n = int(np.ceil(r)) * 2 + 1
        c = n // 2
        yy, xx = np.mgrid[0:n, 0:n]
        templates["target"] = ((xx - c) ** 2 + (yy - c) ** 2 <= r ** 2).astype(np.float64)
        half = int(round(2.0 * u))
        templates["cursor"] = np.ones((2 * half + 1, 2 * half + 1), dtype=np.float64)
    else:
        # the spinner's only positionable landmark is the hub; the arm's pose
        # is an angle, not a translation
        r = 2.5 * u
        n = int(np.ceil(r)) * 2 + 1
        c = n // 2
        yy, xx = np.mgrid[0:n, 0:n]
        templates["hub"] = ((xx - c) ** 2 + (yy - c) ** 2 <= r ** 2).astype(np.float64)
    return templates


def foreground_mask(image: np.ndarray, threshold: float = 40.0) -> np.ndarray:
    """Pixels far from the dominant border color, without assuming a palette."""
    img = np.asarray(image, dtype=np.float64)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    dist = np.abs(img - bg).max(-1)
    return dist > threshold


def extract_entity_positions(image: np.ndarray, spec: EnvSpec,
                             threshold: float = 40.0) -> dict:
    """Locate each entity by maximizing template IoU against the foreground.

    Returns {entity: (x, y)} pixel coordinates of template centers.  The
    matching is purely geometric, so it works identically on either palette
    and on decoded (blurry) frames.
    """
    fg = foreground_mask(image, threshold).astype(np.float64)
    out = {}
    margin = max(int(round(spec.image_hw / 16.0)), 2)
    for name, tmpl in _shape_templates(spec).items():
        # an empty ring around the template penalizes centers inside a larger
        # shape, where a small template would otherwise fit perfectly
        padded = np.pad(tmpl, margin)
        area = tmpl.sum()
        inter = ndimage.correlate(fg, padded, mode="constant")
        in_window = ndimage.correlate(fg, np.ones_like(padded), mode="constant")
        union = area + in_window - inter
        iou = inter / np.maximum(union, 1.0)
        y, x = np.unravel_index(np.argmax(iou), iou.shape)
        out[name] = (float(x), float(y))
    return out


def entity_position_error(img_a: np.ndarray, img_b: np.ndarray,
                          spec: EnvSpec) -> float:
    """Largest per-entity center distance (pixels) between two frames."""
    pa = extract_entity_positions(img_a, spec)
    pb = extract_entity_positions(img_b, spec)
    return max(
        float(np.hypot(pa[k][0] - pb[k][0], pa[k][1] - pb[k][1]))
        for k in pa
    )


def palette_distances(image: np.ndarray, mask: np.ndarray,
                      color_a, color_b) -> tuple[float, float]:
    """Mean color distance of masked pixels to two reference colors."""
    px = np.asarray(image, dtype=np.float64)[mask]
    if px.size == 0:
        raise ValueError("empty mask")
    da = float(np.linalg.norm(px - np.asarray(color_a, dtype=np.float64), axis=-1).mean())
    db = float(np.linalg.norm(px - np.asarray(color_b, dtype=np.float64), axis=-1).mean())
    return da, db


# ---------------------------------------------------------------------------
# Linear domain probing of the contexts
# ---------------------------------------------------------------------------

def probe_domain(model: StateSpaceModel, episodes, train_frac: float = 0.7,
                 seed: int = 0, shuffle_labels: bool = False) -> float:
    """Held-out accuracy of a linear domain classifier on frozen contexts.

    Episodes are split (not individual steps) so no trajectory leaks between
    train and test.  The state-space model receives no updates.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    episodes = list(episodes)
    domains = {ep.domain.index for ep in episodes}
    if len(domains) < 2:
        raise ValueError("probe needs episodes from at least two domains")

    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for ep in episodes:
        h, _ = filter_contexts(model, ep)
        feats.append(h.cpu().numpy().astype(np.float64))
        labels.append(np.full(len(ep), ep.domain.index))
    order = rng.permutation(len(episodes))
    n_train = max(int(round(train_frac * len(episodes))), 1)
    if n_train >= len(episodes):
        n_train = len(episodes) - 1
    train_ids, test_ids = order[:n_train], order[n_train:]
    # both classes must appear on each side of the split
    for ids in (train_ids, test_ids):
        if len({episodes[i].domain.index for i in ids}) < 2:
            raise ValueError("split left a side with a single domain; add episodes")

    X_tr = np.concatenate([feats[i] for i in train_ids])
    y_tr = np.concatenate([labels[i] for i in train_ids])
    X_te = np.concatenate([feats[i] for i in test_ids])
    y_te = np.concatenate([labels[i] for i in test_ids])
    if shuffle_labels:
        # independent fair relabeling; a permutation would couple the train
        # and test label rates and bias the control away from chance
        y_tr = rng.integers(0, 2, size=y_tr.shape)
        y_te = rng.integers(0, 2, size=y_te.shape)
    # standardize per feature: raw context activations have heterogeneous
    # scales that would otherwise swamp the regularized classifier
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, C=100.0))
    clf.fit(X_tr, y_tr)
    return float(clf.score(X_te, y_te))


# ---------------------------------------------------------------------------
# Confusion-coefficient sweep: full train + evaluate per lambda
# ---------------------------------------------------------------------------

def sweep_lambda(cfg: RunConfig, lambdas=LAMBDA_SWEEP_DEFAULT,
                 n_eval_episodes: int = 20) -> dict:
    """Train and evaluate one run per (lambda, seed); returns the summary.

    Writes per-lambda report.json files under out_dir/lam-<value>/ and a
    sweep.json + sweep.csv at the root.  Plotting is left to the caller so
    the chart stays a pure view of sweep.json.
    """
    cfg.validate()
    out_root = Path(cfg.out_dir)
    summary = {"lambdas": list(map(float, lambdas)), "per_lambda": {}}
    for lam in lambdas:
        lam_dir = out_root / f"lam-{lam:g}"
        returns_by_seed = {}
        for seed in cfg.seeds:
            run_dir = lam_dir / f"seed-{seed}"
            train_cfg = replace(cfg.train, lam=float(lam), seed=int(seed))
            state = make_train_state(cfg.ssm, train_cfg)
            buffers = load_buffers(cfg)
            training_loop(state, make_env(cfg), buffers, cfg.cem, run_dir)
            report = evaluate(state, make_env(cfg), cfg.cem,
                              n_episodes=n_eval_episodes, seeds=[seed])
            write_report(report, run_dir)
            returns_by_seed[int(seed)] = report.returns_by_seed[int(seed)]
        report = EvalReport.from_returns(returns_by_seed, cfg.cem.reward_mode)
        write_report(report, lam_dir)
        summary["per_lambda"][f"{lam:g}"] = {
            "mean": report.mean, "std": report.std,
            "p5": report.p5, "p95": report.p95,
        }
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    lines = ["lambda,mean,std,p5,p95"]
    for lam in lambdas:
        s = summary["per_lambda"][f"{lam:g}"]
        lines.append(f"{lam:g},{s['mean']},{s['std']},{s['p5']},{s['p95']}")
    (out_root / "sweep.csv").write_text("\n".join(lines) + "\n")
    return summary


def load_trained(checkpoint_path) -> TrainState:
    return load_checkpoint(checkpoint_path)
