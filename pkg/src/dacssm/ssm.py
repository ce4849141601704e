"""Recurrent mixed deterministic/stochastic state-space model.

The deterministic context h is carried by a GRU cell; the stochastic state s
is a diagonal Gaussian.  The posterior encoder is domain-conditional via hard
routing between per-domain encoder parameter sets; the decoder is conditioned
by concatenating the domain one-hot to [h; s].  The reward head is
deliberately domain-blind: it sees (h, s) only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SSMConfig:
    action_dim: int
    context_size: int = 32
    state_size: int = 8
    image_hw: int = 32
    channels: int = 3
    num_domains: int = 2
    conv_base: int = 32     # channel width of the first conv layer
    embed_size: int = 128   # encoder output / decoder entry width
    hidden_size: int = 128  # MLP width of the prior / posterior / reward heads
    min_std: float = 1e-4

    def __post_init__(self):
        hw = self.image_hw
        if hw < 8 or hw & (hw - 1):
            raise ValueError("image_hw must be a power of two >= 8")


@dataclass
class GaussianParams:
    mean: torch.Tensor
    std: torch.Tensor  # strictly positive, same shape as mean

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator,
                          dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + self.std * eps


@dataclass
class LatentBelief:
    h: torch.Tensor
    s: torch.Tensor
    prior: GaussianParams
    posterior: GaussianParams


def _positive_std(raw: torch.Tensor, min_std: float) -> torch.Tensor:
    return F.softplus(raw) + min_std


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    if (q.std <= 0).any() or (p.std <= 0).any():
        raise ValueError("std must be strictly positive")
    var_ratio = (q.std / p.std) ** 2
    term = ((q.mean - p.mean) / p.std) ** 2
    return 0.5 * (var_ratio + term - 1.0 - torch.log(var_ratio)).sum(-1)


class ConvEncoder(nn.Module):
    """Strided conv stack halving resolution down to 4x4, then a linear embed."""

    def __init__(self, cfg: SSMConfig):
        super().__init__()
        layers = []
        ch_in = cfg.channels
        ch = cfg.conv_base
        hw = cfg.image_hw
        while hw > 4:
            layers.append(nn.Conv2d(ch_in, ch, 4, 2, 1))
            ch_in, ch, hw = ch, ch * 2, hw // 2
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(ch_in * 4 * 4, cfg.embed_size)

    def forward(self, x):
        # x: (B, H, W, C) in [0, 1]
        x = x.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        return self.fc(x.flatten(1))


class ConvDecoder(nn.Module):
    """Mirror of the encoder: linear to 4x4 feature map, transposed convs up."""

    def __init__(self, cfg: SSMConfig):
        super().__init__()
        n_up = int(math.log2(cfg.image_hw // 4))
        chans = [cfg.conv_base * (2 ** i) for i in range(n_up)][::-1]  # widest first
        in_dim = cfg.context_size + cfg.state_size + cfg.num_domains
        self.entry_ch = chans[0]
        self.fc = nn.Linear(in_dim, self.entry_ch * 4 * 4)
        layers = []
        for i in range(n_up):
            ch_out = chans[i + 1] if i + 1 < n_up else cfg.channels
            layers.append(nn.ConvTranspose2d(chans[i], ch_out, 4, 2, 1))
        self.deconvs = nn.ModuleList(layers)

    def forward(self, z):
        x = self.fc(z).view(-1, self.entry_ch, 4, 4)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i + 1 < len(self.deconvs):
                x = F.relu(x)
        return x.permute(0, 2, 3, 1)  # (B, H, W, C) pixel means


class StateSpaceModel(nn.Module):
    def __init__(self, cfg: SSMConfig):
        super().__init__()
        self.cfg = cfg
        c, s, a = cfg.context_size, cfg.state_size, cfg.action_dim

        self.cell = nn.GRUCell(s + a, c)
        self.prior_head = nn.Sequential(
            nn.Linear(c, cfg.hidden_size), nn.ReLU(),
            nn.Linear(cfg.hidden_size, 2 * s),
        )
        # one full encoder + posterior head per domain, hard-routed by label
        self.encoders = nn.ModuleList(ConvEncoder(cfg) for _ in range(cfg.num_domains))
        self.posterior_heads = nn.ModuleList(
            nn.Sequential(
                nn.Linear(c + cfg.embed_size, cfg.hidden_size), nn.ReLU(),
                nn.Linear(cfg.hidden_size, 2 * s),
            )
            for _ in range(cfg.num_domains)
        )
        self.decoder = ConvDecoder(cfg)
        self.reward_head = nn.Sequential(
            nn.Linear(c + s, cfg.hidden_size), nn.ReLU(),
            nn.Linear(cfg.hidden_size, 1),
        )
        # zero-initialized reward output: untrained prediction is exactly 0
        nn.init.zeros_(self.reward_head[-1].weight)
        nn.init.zeros_(self.reward_head[-1].bias)
        self.decode_calls = 0  # instrumented; planning must never decode

    # -- single-step pieces -------------------------------------------------

    def initial_state(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        p = next(self.parameters())
        h = torch.zeros(batch, self.cfg.context_size, dtype=p.dtype, device=p.device)
        s = torch.zeros(batch, self.cfg.state_size, dtype=p.dtype, device=p.device)
        return h, s

    def transition_step(self, h_prev, s_prev, a_prev) -> torch.Tensor:
        return self.cell(torch.cat([s_prev, a_prev], -1), h_prev)

    def prior_state(self, h) -> GaussianParams:
        mean, raw = self.prior_head(h).chunk(2, -1)
        return GaussianParams(mean, _positive_std(raw, self.cfg.min_std))

    def posterior_state(self, h, obs, domains) -> GaussianParams:
        """Posterior params from the encoder selected by the domain label.

        obs: (B, H, W, C) floats in [0, 1]; domains: (B, D) one-hot.
        """
        domains = torch.as_tensor(domains, dtype=h.dtype, device=h.device)
        if domains.ndim == 1:
            domains = domains.unsqueeze(0).expand(h.shape[0], -1)
        if domains.shape[-1] != self.cfg.num_domains:
            raise ValueError(f"domain label has {domains.shape[-1]} entries, "
                             f"model has {self.cfg.num_domains} domains")
        idx = domains.argmax(-1)
        mean = torch.zeros(h.shape[0], self.cfg.state_size, dtype=h.dtype, device=h.device)
        raw = torch.zeros_like(mean)
        for d in range(self.cfg.num_domains):
            mask = idx == d
            if not mask.any():
                continue
            embed = self.encoders[d](obs[mask])
            m, r = self.posterior_heads[d](torch.cat([h[mask], embed], -1)).chunk(2, -1)
            mean = mean.index_put((mask.nonzero(as_tuple=True)[0],), m)
            raw = raw.index_put((mask.nonzero(as_tuple=True)[0],), r)
        return GaussianParams(mean, _positive_std(raw, self.cfg.min_std))

    def decode_observation(self, h, s, domains) -> torch.Tensor:
        self.decode_calls += 1
        domains = torch.as_tensor(domains, dtype=h.dtype, device=h.device)
        if domains.ndim == 1:
            domains = domains.unsqueeze(0).expand(h.shape[0], -1)
        return self.decoder(torch.cat([h, s, domains], -1))

    def predict_reward(self, h, s) -> GaussianParams:
        mean = self.reward_head(torch.cat([h, s], -1)).squeeze(-1)
        return GaussianParams(mean, torch.ones_like(mean))

    def prepare_obs(self, obs) -> torch.Tensor:
        """uint8 images (..., H, W, C) -> model-dtype floats in [0, 1]."""
        p = next(self.parameters())
        t = torch.as_tensor(np.asarray(obs))
        return t.to(dtype=p.dtype, device=p.device) / 255.0


def rollout_posterior(model: StateSpaceModel, obs, actions, domains,
                      generator: torch.Generator | None = None) -> list[LatentBelief]:
    """Filtering pass over one batch of chunks.

    obs: (B, L, H, W, C) uint8 (or prepared floats); actions: (B, L, A);
    domains: (B, D) one-hot.  h_1 is built from zero (h_0, s_0) and a zero
    action; s_t is a reparameterized sample from the posterior.
    """
    if isinstance(obs, np.ndarray) or obs.dtype == torch.uint8:
        obs = model.prepare_obs(obs)
    p = next(model.parameters())
    actions = torch.as_tensor(np.asarray(actions), dtype=p.dtype, device=p.device)
    B, L = obs.shape[0], obs.shape[1]
    if L < 1:
        raise ValueError("chunk length must be >= 1")
    h, s = model.initial_state(B)
    a_prev = torch.zeros(B, model.cfg.action_dim, dtype=p.dtype, device=p.device)
    beliefs = []
    for t in range(L):
        h = model.transition_step(h, s, a_prev)
        prior = model.prior_state(h)
        post = model.posterior_state(h, obs[:, t], domains)
        s = post.sample(generator)
        beliefs.append(LatentBelief(h=h, s=s, prior=prior, posterior=post))
        a_prev = actions[:, t]
    return beliefs


def gaussian_nll(mean: torch.Tensor, target: torch.Tensor, sum_dims=None) -> torch.Tensor:
    """Negative log-likelihood under a unit-variance Gaussian."""
    nll = 0.5 * ((target - mean) ** 2 + LOG_2PI)
    if sum_dims:
        nll = nll.sum(sum_dims)
    return nll


def elbo_loss(model: StateSpaceModel, batch, generator: torch.Generator | None = None,
              beliefs: list[LatentBelief] | None = None):
    """Negative ELBO averaged over batch and time.

    Reconstruction is a unit-variance Gaussian NLL on [0,1] pixels, summed
    over pixels; KL(posterior || prior) is summed over state dimensions.
    Returns (scalar, parts) where parts holds the recon / kl breakdown and the
    beliefs for reuse by downstream losses.
    """
    if batch.batch_size < 1 or batch.length < 1:
        raise ValueError("empty batch")
    obs = model.prepare_obs(batch.observations)
    if beliefs is None:
        beliefs = rollout_posterior(model, obs, batch.actions, batch.domains, generator)
    recon_total = 0.0
    kl_total = 0.0
    for t, b in enumerate(beliefs):
        mean = model.decode_observation(b.h, b.s, batch.domains)
        recon_total = recon_total + gaussian_nll(mean, obs[:, t], sum_dims=(1, 2, 3)).mean()
        kl_total = kl_total + kl_diag_gaussians(b.posterior, b.prior).mean()
    recon = recon_total / len(beliefs)
    kl = kl_total / len(beliefs)
    loss = recon + kl
    return loss, {"recon": recon, "kl": kl, "beliefs": beliefs}


def open_loop_predict(model: StateSpaceModel, h, s, actions, domains,
                      use_samples: bool = False,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Roll the transition forward without observations and decode each step.

    Latents propagate through prior means (deterministic) unless use_samples.
    Returns (B, T, H, W, C) pixel means; empty action sequence gives T=0.
    """
    p = next(model.parameters())
    actions = torch.as_tensor(np.asarray(actions), dtype=p.dtype, device=p.device)
    if actions.ndim == 2:
        actions = actions.unsqueeze(0)
    B, T = h.shape[0], actions.shape[1]
    frames = []
    for t in range(T):
        h = model.transition_step(h, s, actions[:, t])
        prior = model.prior_state(h)
        s = prior.sample(generator) if use_samples else prior.mean
        frames.append(model.decode_observation(h, s, domains))
    if not frames:
        hw, c = model.cfg.image_hw, model.cfg.channels
        return torch.zeros(B, 0, hw, hw, c, dtype=p.dtype, device=p.device)
    return torch.stack(frames, 1)
