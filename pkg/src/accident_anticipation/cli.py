"""Command-line entry point.

Machine-readable results go to stdout as JSON (or plain alert text); logs go
to stderr. Exit codes: 0 ok, 2 configuration, 3 I/O, 4 missing prerequisite,
5 alert delivery.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import plotting
from .alerts import AlertError, ChatClient, MockClient, annotate, build_prompt, request_alert
from .config import RunConfig, dump_config, load_config
from .dataset import ClipPackError, ValidationError, get_profile, load_split, read_clip_pack, read_manifest
from .errors import ConfigurationError, ShapeError
from .metrics import evaluate, export_curves, fmt
from .model import AccidentModel
from .synth import generate_dataset
from .training import build_bundle, load_checkpoint, save_checkpoint, train

log = logging.getLogger("accident_anticipation")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_ALERT = 0, 2, 3, 4, 5


class MissingPrerequisite(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=False) + "\n")
    sys.stdout.flush()


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _manifest(args, cfg: RunConfig):
    path = args.manifest or cfg.dataset.manifest
    if not path:
        path = str(Path(cfg.dataset.out_dir) / "manifest.jsonl")
    if not Path(path).exists():
        raise MissingPrerequisite(f"manifest not found: {path}")
    return read_manifest(path, cfg.dataset.profile)


def _load_model(path, cfg: RunConfig):
    if not path:
        raise MissingPrerequisite("--checkpoint is required")
    if not Path(path).exists():
        raise MissingPrerequisite(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    model.cfg.n_iter_test = cfg.model.n_iter_test
    return model, meta


def cmd_config(args) -> int:
    text = dump_config(_config(args))
    if args.out:
        Path(args.out).write_text(text)
        _emit({"config": str(args.out)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    pos, neg = args.counts if args.counts else (cfg.dataset.count_pos, cfg.dataset.count_neg)
    out = args.out or cfg.dataset.out_dir
    manifest = generate_dataset(seed, pos, neg, cfg.dataset.scenario, out)
    path = Path(out) / "manifest.jsonl"
    log.info("wrote %d clips to %s", len(manifest.entries), out)
    _emit({"manifest": str(path), "clips": len(manifest.entries)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    phase = args.phase
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    profile = get_profile(cfg.dataset.profile)
    if phase == 2 and not profile.has_involvement:
        raise MissingPrerequisite(
            f"profile {profile.name!r} carries no per-object involvement labels; localization training needs them"
        )
    manifest = _manifest(args, cfg)
    train_clips = load_split(manifest, "train")
    val_clips = load_split(manifest, "test")
    if not train_clips:
        raise ConfigurationError("manifest has an empty train split")
    d_v = train_clips[0].frame_features.shape[1]
    d_o = train_clips[0].object_features.shape[2]
    torch.manual_seed(cfg.train.seed)
    if phase == 2:
        model, meta = _load_model(args.checkpoint, cfg)
        if meta.get("phase") != 1 and meta.get("phase") != 2:
            raise MissingPrerequisite("phase 2 needs a checkpoint produced by phase-1 training")
    elif args.checkpoint:
        model, _ = _load_model(args.checkpoint, cfg)
    else:
        if (cfg.model.d_v, cfg.model.d_o) != (d_v, d_o):
            raise ConfigurationError(f"model dims ({cfg.model.d_v}, {cfg.model.d_o}) != data dims ({d_v}, {d_o})")
        model = AccidentModel(replace(cfg.model))
    history = train(model, train_clips, cfg.train.for_phase(phase), cfg.loss.for_phase(phase), val_clips)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = history.rows[-1]
    metrics = {k: last.get(k) for k in ("val_AP", "val_mTTA", "val_AOLA") if last.get(k) is not None}
    ckpt = out / f"phase{phase}.ckpt"
    hist = out / f"history_phase{phase}.csv"
    save_checkpoint(ckpt, model, {"phase": phase, "epoch": last["epoch"], "metrics": metrics,
                                  "seed": cfg.train.seed})
    history.to_csv(hist)
    plotting.history_figure(history.rows, out / f"history_phase{phase}.png")
    result = {"checkpoint": str(ckpt), "history": str(hist)}
    result.update({k.replace("val_", ""): v for k, v in metrics.items()})
    _emit(result)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, meta = _load_model(args.checkpoint, cfg)
    manifest = _manifest(args, cfg)
    clips = load_split(manifest, "test")
    if not clips:
        raise ConfigurationError("manifest has an empty test split")
    localized = meta.get("phase") == 2 and get_profile(cfg.dataset.profile).has_involvement
    out = Path(args.out or Path(cfg.output_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.metrics
    bundle = build_bundle(model, clips, grid_size=m.grid_size, with_localization=localized)
    result = evaluate(bundle, m.ap_mode, m.recall_target)
    export_curves(bundle, out, m.ap_mode)
    plotting.score_curves(bundle, out / "scores.png", cfg.alerts.threshold)
    plotting.pr_figure(bundle, out / "pr_curve.png", m.ap_mode)
    plotting.tta_sweep(bundle, out / "tta_sweep.png")
    if args.sweep_iters:
        rows = []
        for n in range(1, model.cfg.n_iter_train + 1):
            b = build_bundle(model, clips, n_iter=n, grid_size=m.grid_size, with_localization=localized)
            rows.append({"n_iter": n, **evaluate(b, m.ap_mode, m.recall_target)})
        with open(out / "iter_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_iter", "AP", "mTTA", "TTA@R80", "AOLA"])
            for r in rows:
                w.writerow([r["n_iter"]] + ["" if r[k] is None else fmt(r[k]) for k in ("AP", "mTTA", "TTA@R80", "AOLA")])
        plotting.iteration_sweep(rows, out / "iter_sweep.png")
        for r in rows:
            log.info("n_iter_test=%d AP=%.4f mTTA=%.3f", r["n_iter"], r["AP"], r["mTTA"])
    _emit({k: result[k] for k in ("AP", "mTTA", "TTA@R80", "AOLA")})
    return EXIT_OK


def cmd_alert(args) -> int:
    cfg = _config(args)
    model, _ = _load_model(args.checkpoint, cfg)
    if not args.clip:
        raise MissingPrerequisite("--clip is required")
    clip = read_clip_pack(args.clip)
    score, loc = model.predict([clip])[0]
    a = cfg.alerts
    ann = annotate(clip.clip_id, score, loc, clip.boxes, clip.fps, a.threshold, a.persistence,
                   clip.accident_frame, clip.categories)
    if ann is None:
        sys.stdout.write("no alert\n")
        return EXIT_OK
    bundle = build_prompt(ann, a.template_version)
    if a.endpoint:
        client = ChatClient(a.endpoint, a.model, a.timeout, a.retries, a.backoff, a.max_tokens)
    else:
        client = MockClient()
    sys.stdout.write(request_alert(bundle, client) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accident-anticipation", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run configuration")
        p.set_defaults(func=fn)
        return p

    p = add("config", cmd_config, "print or write the (default) configuration")
    p.add_argument("--out")

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--counts", type=int, nargs=2, metavar=("POS", "NEG"))
    p.add_argument("--out")

    p = add("train", cmd_train, "train phase 1 (anticipation) or phase 2 (localization)")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint", help="phase-1 checkpoint (required for phase 2)")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--sweep-iters", action="store_true", help="also evaluate every test iteration count")

    p = add("alert", cmd_alert, "run the alert pipeline on one clip")
    p.add_argument("--checkpoint")
    p.add_argument("--clip")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(args.threads, 1))
    try:
        return args.func(args)
    except (ConfigurationError, ShapeError, ValidationError) as exc:
        return _fail(EXIT_CONFIG, f"configuration error: {exc}")
    except MissingPrerequisite as exc:
        return _fail(EXIT_MISSING, str(exc))
    except AlertError as exc:
        return _fail(EXIT_ALERT, f"alert delivery failed: {exc}")
    except (OSError, ClipPackError) as exc:
        return _fail(EXIT_IO, f"I/O error: {exc}")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
