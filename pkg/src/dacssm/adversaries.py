"""Domain and optimality discriminators and their weighted adversarial losses.

Both discriminators are two 64-unit fully connected layers with rectifier
activations and a sigmoid output.  The domain discriminator reads the context
h alone; the optimality discriminator reads the (h, a) pair.  Loss formulas
carry an asymmetric factor of 2 on the single-buffer term so the two sides of
each split are balanced against the two pooled buffers.
"""

from __future__ import annotations

import torch
import torch.nn as nn

EPS_LOG = 1e-6


class Discriminator(nn.Module):
    """MLP probability head; zero-initialized output layer so the untrained
    network emits exactly 0.5."""

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.clamp_hits = 0  # probability outputs that needed log-clamping

    def forward(self, *inputs) -> torch.Tensor:
        x = torch.cat(inputs, -1) if len(inputs) > 1 else inputs[0]
        return torch.sigmoid(self.net(x)).squeeze(-1)


def make_domain_discriminator(context_size: int = 32) -> Discriminator:
    return Discriminator(context_size)


def make_optimality_discriminator(context_size: int, action_dim: int) -> Discriminator:
    return Discriminator(context_size + action_dim)


def _clamped_log(p: torch.Tensor, counter: Discriminator | None = None) -> torch.Tensor:
    if counter is not None:
        counter.clamp_hits += int(((p < EPS_LOG) | (p > 1.0 - EPS_LOG)).sum())
    return torch.log(p.clamp(EPS_LOG, 1.0 - EPS_LOG))


def domain_disc_loss(d_agent: torch.Tensor, d_expert: torch.Tensor,
                     d_novice: torch.Tensor, counter: Discriminator | None = None
                     ) -> torch.Tensor:
    """2*E_A[ln d] + E_E[ln(1-d)] + E_N[ln(1-d)] over discriminator outputs.

    Output convention: 1 means "agent domain".  The value is <= 0 with
    supremum 0 at perfect domain classification.
    """
    for d in (d_agent, d_expert, d_novice):
        if d.numel() == 0:
            raise ValueError("empty discriminator batch")
    return (2.0 * _clamped_log(d_agent, counter).mean()
            + _clamped_log(1.0 - d_expert, counter).mean()
            + _clamped_log(1.0 - d_novice, counter).mean())


def optimality_disc_loss(d_agent: torch.Tensor, d_expert: torch.Tensor,
                         d_novice: torch.Tensor, counter: Discriminator | None = None
                         ) -> torch.Tensor:
    """E_A[ln d] + 2*E_E[ln(1-d)] + E_N[ln d] over discriminator outputs.

    Written in likelihood form over the expert/non-expert split; the training
    direction (which side ascends) is fixed by the trainer.
    """
    for d in (d_agent, d_expert, d_novice):
        if d.numel() == 0:
            raise ValueError("empty discriminator batch")
    return (_clamped_log(d_agent, counter).mean()
            + 2.0 * _clamped_log(1.0 - d_expert, counter).mean()
            + _clamped_log(d_novice, counter).mean())


def domain_disc_training_loss(d_agent, d_expert, d_novice, counter=None) -> torch.Tensor:
    """Weighted binary cross-entropy the domain discriminator descends:
    the negation of domain_disc_loss (agent labeled 1, expert/novice 0)."""
    return -domain_disc_loss(d_agent, d_expert, d_novice, counter)


def optimality_disc_training_loss(d_agent, d_expert, d_novice, counter=None) -> torch.Tensor:
    """Weighted binary cross-entropy the optimality discriminator descends.

    Expert pairs are labeled 1 (so ln D_O is a well-signed imitation reward),
    agent and novice pairs 0, keeping the factor 2 on the expert term.
    """
    for d in (d_agent, d_expert, d_novice):
        if d.numel() == 0:
            raise ValueError("empty discriminator batch")
    return -(_clamped_log(1.0 - d_agent, counter).mean()
             + 2.0 * _clamped_log(d_expert, counter).mean()
             + _clamped_log(1.0 - d_novice, counter).mean())
