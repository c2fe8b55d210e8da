import time

import numpy as np
import pytest
import torch

from langtrack.config import ModelConfig, RunConfig
from langtrack.data import SynthConfig, generate_dataset

torch.set_num_threads(1)


def micro_cfg(**kw) -> ModelConfig:
    base = dict(image_height=16, image_width=16, feature_dim=8, stride=4, encoder_width=4,
                token_dim=8, num_learnable_tokens=2, num_mapped_tokens=2, mapping_hidden=8,
                heads=2, text_heads=2, text_layers=1, self_layers=1, cross_layers=1,
                update_hidden=8, window_len=4, window_overlap=2, refine_iters=2,
                corr_radius=1, pyramid_levels=2, max_text_len=8)
    base.update(kw)
    return ModelConfig(**base).validate()


def fd_max_rel_error(fn, x: torch.Tensor, eps: float = 1e-5, max_entries: int = 40,
                     seed: int = 0) -> float:
    """Max relative error between autograd and central differences over sampled entries of ``x``."""
    x = x.detach().clone().contiguous().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    flat = x.detach().reshape(-1)
    rng = np.random.default_rng(seed)
    idx = np.arange(flat.numel())
    if idx.size > max_entries:
        idx = rng.choice(idx, size=max_entries, replace=False)
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            num = (fn(xp.view_as(x)) - fn(xm.view_as(x))).item() / (2 * eps)
            ana = grad.reshape(-1)[i].item()
            scale = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / scale)
    return worst


@pytest.fixture(scope="session")
def overfit_records():
    return generate_dataset(SynthConfig(), 8, seed=0)


@pytest.fixture(scope="session")
def overfit_run(overfit_records):
    """Default configuration trained on the eight synthetic clips; returns (trainer, seconds)."""
    from langtrack.train import Trainer

    run = RunConfig()
    tr = Trainer(run)
    t0 = time.perf_counter()
    tr.fit(overfit_records, run.train.iterations)
    elapsed = time.perf_counter() - t0
    tr.model.eval()
    return tr, elapsed
