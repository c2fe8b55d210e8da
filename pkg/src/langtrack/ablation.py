"""Ablation harness over the token, decoder-depth and integration switches."""

from __future__ import annotations

import csv
import io
import logging
from typing import NamedTuple

import numpy as np
import torch

from .config import RunConfig
from .encoders import to_frames_tensor
from .metrics import MetricsReport, evaluate, model_predictor
from .train import Trainer

log = logging.getLogger(__name__)


class Variant(NamedTuple):
    axis: str
    label: str
    overrides: dict


def default_variants() -> list:
    out = [
        Variant("learnable_tokens", "tokens on", {"num_learnable_tokens": 8}),
        Variant("learnable_tokens", "tokens off", {"num_learnable_tokens": 0}),
        Variant("mapping", "mlp", {"mapping_network": "mlp"}),
        Variant("mapping", "transformer", {"mapping_network": "transformer"}),
    ]
    out += [Variant("layers", f"{n}+{n}", {"self_layers": n, "cross_layers": n})
            for n in (0, 4, 6, 10)]
    out += [Variant("integration", m, {"integration": m})
            for m in ("cat_only", "map_only", "cat_and_map")]
    out += [Variant("decoder", "on", {"decoder_enabled": True}),
            Variant("decoder", "off", {"decoder_enabled": False})]
    return out


def train_and_eval(run: RunConfig, records, steps: int, protocol: str = "first"):
    tr = Trainer(run)
    tr.fit(records, steps)
    tr.model.eval()
    return tr.model, evaluate(model_predictor(tr.model), records, protocol), tr.history


def run_ablation(records, base: RunConfig = None, steps: int = 200, variants=None,
                 protocol: str = "first") -> list:
    """Train each variant from the same seed for ``steps`` steps; returns (Variant, MetricsReport) rows."""
    base = base or RunConfig()
    variants = default_variants() if variants is None else variants
    rows = []
    for v in variants:
        run = base.replace(**v.overrides)
        log.info("ablation %s / %s", v.axis, v.label)
        _, rep, _ = train_and_eval(run, records, steps, protocol)
        rows.append((v, rep))
    return rows


def ablation_table(rows) -> str:
    """Fixed-width comparison table."""
    cols = ("aj", "delta_avg", "oa", "mte", "survival")
    lines = [f"{'axis':<18}{'variant':<14}" + "".join(f"{c:>11}" for c in cols)]
    for v, rep in rows:
        vals = "".join(f"{'-' if getattr(rep, c) is None else format(getattr(rep, c), '.4f'):>11}"
                       for c in cols)
        lines.append(f"{v.axis:<18}{v.label:<14}{vals}")
    return "\n".join(lines) + "\n"


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = None
    for v, rep in rows:
        row = {"axis": v.axis, **rep.row(v.label)}
        if writer is None:
            writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
            writer.writeheader()
        writer.writerow({k: ("" if x is None else x) for k, x in row.items()})
    return buf.getvalue()


@torch.no_grad()
def decoder_feature_difference(model, frames) -> float:
    """Max abs difference between fused features with the decoder enabled and bypassed."""
    x = to_frames_tensor(np.asarray(frames), model.dtype)
    flag = model.cfg.decoder_enabled
    try:
        model.cfg.decoder_enabled = True
        on = model.features(x)
        model.cfg.decoder_enabled = False
        off = model.features(x)
    finally:
        model.cfg.decoder_enabled = flag
    return float((on - off).abs().max())
