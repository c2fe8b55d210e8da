"""Command-line entry point: ``langtrack {gen-data,train,eval,probe,viz,ablate}``.

Exit codes: 0 success, 1 invalid usage / configuration / input, 2 runtime failure.
Every subcommand writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import PIL
import torch

from . import __version__
from .ablation import ablation_csv, ablation_table, decoder_feature_difference, run_ablation
from .config import RunConfig, apply_overrides, dump_config, load_config
from .data import (SynthConfig, generate_dataset, load_records, sample_queries, save_records,
                   write_tracks_text)
from .errors import ConfigError, InputError, IntegrityError, ParseError
from .metrics import evaluate, model_predictor
from .model import build_model
from .probe import probe_table, run_probe
from .train import Trainer, load_model, state_hash
from .viz import point_overlay, render_trajectories

log = logging.getLogger("langtrack")

VALIDATION_ERRORS = (ConfigError, InputError, IntegrityError, ParseError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def dataset_hash(records) -> str:
    """Content hash over record names, annotations and 8-bit frames."""
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.name):
        h.update(rec.name.encode())
        h.update(write_tracks_text(rec).encode())
        u8 = np.clip(np.rint(rec.clip.frames * 255.0), 0, 255).astype(np.uint8)
        h.update(u8.tobytes())
    return h.hexdigest()


def versions() -> dict:
    return {"langtrack": __version__, "python": platform.python_version(),
            "torch": torch.__version__, "numpy": np.__version__, "pillow": PIL.__version__}


def write_manifest(out: Path, command: str, run: RunConfig = None, seed: int = None,
                   checkpoint_hash: str = None, data_hash: str = None, extra: dict = None) -> Path:
    manifest = {
        "command": command,
        "config": run.to_flat() if run is not None else None,
        "seed": seed,
        "versions": versions(),
        "checkpoint_hash": checkpoint_hash,
        "data_hash": data_hash,
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    return path


# ------------------------------------------------------------------ parsing

def _model_flags(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--decoder", choices=("on", "off"))
    p.add_argument("--integration", choices=("cat_only", "map_only", "cat_and_map"))
    p.add_argument("--self-layers", type=int)
    p.add_argument("--cross-layers", type=int)
    p.add_argument("--mapping", choices=("mlp", "transformer"))


def build_parser() -> Parser:
    parser = Parser(prog="langtrack", description="language-assisted point tracking")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int)
    p.add_argument("--sprites", type=int)
    p.add_argument("--occluder-density", type=float)

    p = sub.add_parser("train", help="train a model")
    _model_flags(p)
    p.add_argument("--data", help="dataset directory (default: synthetic, 8 clips)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("first", "strided"), default="first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", help="nearest-neighbour correspondence probe")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.1)

    p = sub.add_parser("viz", help="render predicted trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=("first", "strided"), default="first")
    p.add_argument("--video", help="only this record")
    p.add_argument("--threshold", type=float, default=4.0)

    p = sub.add_parser("ablate", help="short training runs over the ablation switches")
    _model_flags(p)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    return parser


def run_config(args) -> RunConfig:
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.decoder is not None:
        flags["decoder_enabled"] = args.decoder == "on"
    if args.integration is not None:
        flags["integration"] = args.integration
    if args.self_layers is not None:
        flags["self_layers"] = args.self_layers
    if args.cross_layers is not None:
        flags["cross_layers"] = args.cross_layers
    if args.mapping is not None:
        flags["mapping_network"] = args.mapping
    if args.config:
        return load_config(args.config, flags)
    return apply_overrides(RunConfig(), flags)


def _records(data):
    if data is None:
        return generate_dataset(SynthConfig(), 8, seed=0)
    records = load_records(data)
    if not records:
        raise IntegrityError(f"no records found in {data}")
    return records


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> None:
    over = {}
    if args.frames is not None:
        over["n_frames"] = args.frames
    if args.sprites is not None:
        over["n_sprites"] = args.sprites
    if args.occluder_density is not None:
        over["occluder_density"] = args.occluder_density
    try:
        cfg = SynthConfig(**over).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.clips < 1:
        raise ConfigError("--clips must be >= 1")
    records = generate_dataset(cfg, args.clips, seed=args.seed)
    out = Path(args.out)
    save_records(records, out)
    write_manifest(out, "gen-data", seed=args.seed, data_hash=dataset_hash(records),
                   extra={"synth": vars(cfg), "clips": args.clips})


def cmd_train(args) -> None:
    run = run_config(args)
    if args.steps is not None:
        run = run.replace(iterations=args.steps)
    records = _records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(run.train.seed)
    trainer = Trainer(run)
    with open(out / "losses.txt", "w") as fh:
        fh.write("iteration total track visibility\n")

        def record(it, rep):
            fh.write(f"{it} {rep.total!r} {rep.track_loss!r} {rep.visibility_loss!r}\n")
            if run.train.log_every and it % run.train.log_every == 0:
                log.info("iter %d total %.4f", it, rep.total)

        trainer.fit(records, run.train.iterations, callback=record)
    ck_hash = trainer.save(out / "model.ckpt")
    (out / "config.txt").write_text(dump_config(run))
    write_manifest(out, "train", run, run.train.seed, ck_hash, dataset_hash(records))


def cmd_eval(args) -> None:
    model, run, ck_hash = load_model(args.checkpoint)
    records = _records(args.data)
    agg, per_video = evaluate(model_predictor(model), records, args.protocol, return_videos=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(agg.to_json())
    (out / "metrics.csv").write_text(agg.to_csv(args.protocol))
    rows = [rep.to_csv(name).splitlines() for name, rep in per_video]
    if rows:
        text = "\n".join([rows[0][0]] + [r[1] for r in rows]) + "\n"
        (out / "videos.csv").write_text(text)
    write_manifest(out, "eval", run, run.train.seed, ck_hash, dataset_hash(records),
                   extra={"protocol": args.protocol})
    print(agg.to_json(), end="")


def cmd_probe(args) -> None:
    model, run, ck_hash = load_model(args.checkpoint)
    records = _records(args.data)
    results = run_probe(model, records, args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = probe_table(results)
    (out / "probe.txt").write_text(table)
    for rec, res in zip(records, results):
        thr = args.alpha * max(res.bbox)
        point_overlay(rec.clip.frames[-1], res.pred_matched, res.gt, thr).save(
            out / f"{res.name}_matched.png")
        point_overlay(rec.clip.frames[-1], res.pred_mismatched, res.gt, thr).save(
            out / f"{res.name}_mismatched.png")
    write_manifest(out, "probe", run, run.train.seed, ck_hash, dataset_hash(records),
                   extra={"alpha": args.alpha})
    print(table, end="")


def cmd_viz(args) -> None:
    model, run, ck_hash = load_model(args.checkpoint)
    records = _records(args.data)
    if args.video:
        records = [r for r in records if r.name == args.video]
        if not records:
            raise InputError(f"no record named {args.video!r}")
    out = Path(args.out)
    predict = model_predictor(model)
    for rec in records:
        queries = sample_queries(rec.tracks, args.protocol)
        gt = rec.tracks.select([q.track for q in queries])
        pred = predict(rec.clip, queries, args.protocol)
        render_trajectories(rec, pred, out / rec.name, args.threshold, gt=gt)
    write_manifest(out, "viz", run, run.train.seed, ck_hash, dataset_hash(records),
                   extra={"protocol": args.protocol, "threshold": args.threshold})


def cmd_ablate(args) -> None:
    run = run_config(args)
    records = _records(args.data)
    rows = run_ablation(records, run, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    diff = decoder_feature_difference(build_model(run.model), records[0].clip.frames[:2])
    write_manifest(out, "ablate", run, run.train.seed, None, dataset_hash(records),
                   extra={"steps": args.steps, "decoder_feature_max_abs_diff": diff})
    print(table, end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "probe": cmd_probe, "viz": cmd_viz, "ablate": cmd_ablate}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
