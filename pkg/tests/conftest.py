import numpy as np
import pytest
import torch

from dacssm.data import ChunkBatch
from dacssm.ssm import SSMConfig, StateSpaceModel


def micro_config(action_dim=2):
    """Tiny 8x8 model used for finite-difference gradient checks."""
    return SSMConfig(
        action_dim=action_dim,
        context_size=8,
        state_size=4,
        image_hw=8,
        conv_base=2,
        embed_size=8,
        hidden_size=8,
    )


def make_micro_model(seed=0, dtype=torch.float64) -> StateSpaceModel:
    torch.manual_seed(seed)
    model = StateSpaceModel(micro_config())
    return model.to(dtype)


def make_batch(B=2, L=4, hw=8, A=2, seed=0, num_domains=2):
    rng = np.random.default_rng(seed)
    domains = np.zeros((B, num_domains), dtype=np.float32)
    domains[np.arange(B), rng.integers(0, num_domains, B)] = 1.0
    return ChunkBatch(
        observations=rng.integers(0, 256, size=(B, L, hw, hw, 3), dtype=np.uint8),
        actions=rng.uniform(-1, 1, size=(B, L, A)).astype(np.float32),
        rewards=rng.uniform(0, 1, size=(B, L)).astype(np.float32),
        domains=domains,
        source_tags=[None] * B,
    )


def flat_params(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_params(model, vec):
    off = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(vec[off:off + n].reshape(p.shape))
            off += n


def finite_difference_grad(model, loss_fn, step=1e-4):
    """Central-difference gradient of loss_fn() w.r.t. all model parameters.

    loss_fn must be a pure function of the current parameter values (any
    sampling inside must be re-seeded identically on every call).
    """
    base = flat_params(model).clone()
    grad = torch.zeros_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            for sign in (1.0, -1.0):
                vec = base.clone()
                vec[i] += sign * step
                set_flat_params(model, vec)
                grad[i] += sign * float(loss_fn())
    set_flat_params(model, base)
    return grad / (2.0 * step)


def autograd_flat(model, loss_fn):
    for p in model.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in model.parameters()
    ])


def relative_grad_error(g_ref, g_test):
    return float(torch.linalg.norm(g_ref - g_test)
                 / max(float(torch.linalg.norm(g_ref)), 1e-12))
