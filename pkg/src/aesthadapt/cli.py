"""Command-line entry point: ``aesthadapt <subcommand> ...``.

Exit codes: 0 success, 1 I/O error, 2 validation error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .enhance import EnhanceConfig, enhance
from .evaluation import aggregate, combine_folds, evaluate_user, global_rho
from .model import AdapterConfig, BackboneConfig, Placement, ProfileMismatch, TrainMode, attach_adapters, build_backbone
from .numerics import NumericalError, RandomSource
from .persistence import (
    Checkpoint,
    FormatError,
    ProfileFile,
    load_checkpoint,
    load_profile,
    profile_model,
    save_checkpoint,
    save_profile,
    write_json,
)
from .train import FoldPlan, Regime, adapt_user, run_regime_suite, table_regimes, train_generic

log = logging.getLogger("aesthadapt")

MODES = {"bottleneck": TrainMode.BOTTLENECK_ONLY, "all": TrainMode.FULL_FINETUNE, "adapters": TrainMode.ADAPTERS_PLUS_BOTTLENECK}
PLACEMENTS = {"none": Placement.NONE, "all": Placement.ALL_BLOCKS, "late": Placement.LATE_BLOCKS}


class UsageError(ValueError):
    pass


def _run_config(args) -> dict:
    # output destinations do not affect results, so artifacts stay relocatable
    skip = {"func", "command", "out", "out_dir", "output", "verbose"}

    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return {k: plain(v) for k, v in sorted(vars(args).items()) if k not in skip}


def _emit(obj, out) -> None:
    if out:
        write_json(out, obj)
    else:
        sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _require_file(path: Path, what: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_corpus(manifest: Path):
    _require_file(manifest, "manifest")
    records = D.load_manifest(manifest)
    return records, D.ImageStore(D.manifest_root(manifest))


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    if args.users <= 0 or args.images <= 0 or args.size <= 0:
        raise UsageError("--users, --images and --size must be positive")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    corpus = D.synth_generate(args.users, args.images, args.size, args.seed, noise_sigma=args.noise)
    D.write_corpus(corpus, out)
    print(f"wrote {len(corpus.images)} images, {len(corpus.records)} ratings to {out}")
    return 0


def cmd_train_generic(args) -> int:
    records, store = _load_corpus(args.manifest)
    rng = RandomSource(args.seed)
    split = D.split_by_users(records, args.test_users, rng.child("split"))
    if args.full_scale:
        cfg = BackboneConfig.full_scale()
    else:
        cfg = BackboneConfig(tuple(int(c) for c in args.channels.split(",")), input_size=args.input_size, head_width=args.head_width)
    mean, std = D.channel_stats(store[r] for r in sorted(split.train_images))
    aug = D.AugmentationConfig(args.resize, args.crop, 0.5, mean, std)
    prep = D.Preprocessor(store, aug)
    model = build_backbone(cfg, rng.child("model"))

    def report(epoch, loss):
        print(f"epoch {epoch:3d}  loss {loss:.6f}", flush=True)

    res = train_generic(model, list(split.train), prep, args.epochs, args.batch_size, rng=rng.child("train"), on_epoch=report)
    extra = {
        "run_config": _run_config(args),
        "test_users": sorted(split.test_users),
        "losses": res.losses,
        "n_train_records": len(split.train),
    }
    save_checkpoint(args.out, Checkpoint(res.model, res.stats, aug, extra))
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_adapt_user(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    records, store = _load_corpus(args.manifest)
    mode = MODES[args.mode]
    placement = PLACEMENTS[args.placement] if args.placement else None
    if mode is TrainMode.ADAPTERS_PLUS_BOTTLENECK:
        if placement in (None, Placement.NONE):
            raise UsageError("--mode adapters needs --placement all or late")
    elif placement not in (None, Placement.NONE) or args.reduction != "full":
        raise UsageError("--placement/--reduction only apply to --mode adapters")
    user_recs = [r for r in records if r.user == args.user]
    if not user_recs:
        raise UsageError(f"unknown user {args.user!r}")
    if len(user_recs) <= args.n:
        raise UsageError(f"user {args.user} has {len(user_recs)} ratings; --n {args.n} needs more")

    rng = RandomSource(args.seed)
    model = ckpt.model
    if mode is TrainMode.ADAPTERS_PLUS_BOTTLENECK:
        model = attach_adapters(model, AdapterConfig(placement, args.reduction), rng.child("adapters"))
    prep = D.Preprocessor(store, ckpt.augmentation)
    plan = FoldPlan.n10() if args.n == 10 else FoldPlan.n100()
    norm = D.normalize_ratings(user_recs, ckpt.stats)
    folds = adapt_user(model, norm, mode, plan, prep, args.epochs, args.batch_size, rng.child("user", args.user))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_hash = ckpt.config_hash
    fold_reports, fold_results = [], []
    for f in folds:
        res = evaluate_user(model, f.profile, f.holdout, prep, args.user)
        fold_results.append(res)
        path = out / f"{args.user}.fold{f.fold:02d}.prof"
        extra = {
            "fold": f.fold,
            "plan": plan.to_dict(),
            "observed": [r.image for r in f.observed],
            "holdout": [r.image for r in f.holdout],
            "losses": f.losses,
        }
        save_profile(path, ProfileFile(f.profile, ck_hash, extra))
        fold_reports.append({"fold": f.fold, "profile": path.name, **res.to_dict()})
    combined = combine_folds(fold_results)
    report = {
        "user_id": args.user,
        "mode": mode.value,
        "adapters": model.adapter_config.to_dict(),
        "checkpoint_hash": ck_hash,
        "folds": fold_reports,
        "mean_rho": combined.rho,
        "run_config": _run_config(args),
    }
    write_json(out / f"{args.user}.report.json", report)
    print(f"{len(folds)} profiles written to {out}; mean holdout rho {combined.rho:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    records, store = _load_corpus(args.manifest)
    prep = D.Preprocessor(store, ckpt.augmentation)
    norm = D.normalize_ratings(records, ckpt.stats)
    by_user = D.records_by_user(norm)

    if args.profiles:
        per_user: dict[str, list] = {}
        for p in args.profiles:
            _require_file(p, "profile")
            pf = load_profile(p, ckpt)
            model = profile_model(ckpt, pf.profile)
            holdout_refs = set(pf.extra.get("holdout", []))
            recs = [r for r in by_user.get(pf.profile.user_id, []) if not holdout_refs or r.image in holdout_refs]
            if len(recs) < 2:
                raise UsageError(f"profile {p}: fewer than 2 evaluation records for user {pf.profile.user_id}")
            per_user.setdefault(pf.profile.user_id, []).append(evaluate_user(model, pf.profile, recs, prep))
        results = [combine_folds(v) for v in per_user.values()]
        test_recs = [r for u in per_user for r in by_user[u]]
    else:
        users = ckpt.extra.get("test_users") or sorted(by_user)
        users = [u for u in users if u in by_user]
        if not users:
            raise UsageError("none of the checkpoint's test users appear in the manifest")
        results = [evaluate_user(ckpt.model, None, by_user[u], prep, u) for u in users]
        test_recs = [r for u in users for r in by_user[u]]
    report = aggregate(results)
    if args.global_rho:
        report.global_rho = global_rho(ckpt.model, test_recs, prep)
    out = report.to_dict()
    out["checkpoint_hash"] = ckpt.config_hash
    out["run_config"] = _run_config(args)
    _emit(out, args.out)
    return 0


def cmd_enhance(args) -> int:
    if args.epsilon < 0:
        raise UsageError("--epsilon must be non-negative")
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.input, "input image")
    ckpt = load_checkpoint(args.checkpoint)
    model, profile = ckpt.model, None
    if args.profile:
        pf = load_profile(args.profile, ckpt)
        profile = pf.profile
        model = profile_model(ckpt, profile)
    try:
        image = D.load_image(args.input)
    except OSError as exc:
        raise OSError(f"cannot read image {args.input}: {exc}") from exc
    cfg = EnhanceConfig(args.epsilon, args.steps)
    res = enhance(image, model, profile, cfg, ckpt.augmentation)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_image(out, res.image)
    side = res.sidecar(cfg)
    side["run_config"] = _run_config(args)
    write_json(out.with_name(out.name + ".json"), side)
    print(f"score {res.score_before:.6f} -> {res.score_after:.6f}; wrote {out}")
    return 0


def cmd_suite(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    records, store = _load_corpus(args.manifest)
    known = {r.name: r for r in table_regimes()}
    names = args.regimes.split(",") if args.regimes else list(known)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise UsageError(f"unknown regimes {unknown}; choose from {sorted(known)}")
    users = set(ckpt.extra.get("test_users") or {r.user for r in records})
    test = [r for r in records if r.user in users]
    prep = D.Preprocessor(store, ckpt.augmentation)
    reports = run_regime_suite(
        ckpt.model, test, [known[n] for n in names], prep, ckpt.stats, RandomSource(args.seed), args.epochs, args.batch_size
    )
    out = {name: rep.to_dict() for name, rep in reports.items()}
    for name, rep in reports.items():
        print(f"{name:22s} mean {rep.mean_rho:+.3f}  sd {rep.sigma_rho:.3f}  med {rep.median_rho:+.3f}  "
              f"min {rep.min_rho:+.3f}  max {rep.max_rho:+.3f}", file=sys.stderr)
    _emit({"regimes": out, "checkpoint_hash": ckpt.config_hash, "run_config": _run_config(args)}, args.out)
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aesthadapt", description="Personalized image-aesthetics scoring with residual adapters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic preference corpus")
    s.add_argument("--users", type=int, default=48)
    s.add_argument("--images", type=int, default=2000)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.35)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-generic", help="train the shared scoring network")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--test-users", type=int, default=8)
    s.add_argument("--channels", default="8,16,32,64")
    s.add_argument("--input-size", type=int, default=32)
    s.add_argument("--head-width", type=int, default=64)
    s.add_argument("--resize", type=int, default=40)
    s.add_argument("--crop", type=int, default=32)
    s.add_argument("--full-scale", action="store_true", help="ResNet-18 widths, 224 input, 1000-wide head")
    s.set_defaults(func=cmd_train_generic)

    s = sub.add_parser("adapt-user", help="fit per-user profiles under one regime")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--mode", choices=sorted(MODES), required=True)
    s.add_argument("--placement", choices=sorted(PLACEMENTS))
    s.add_argument("--reduction", choices=["full", "1", "quarter", "half"], default="full")
    s.add_argument("--n", type=int, choices=[10, 100], default=100)
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", type=Path, required=True)
    s.set_defaults(func=cmd_adapt_user)

    s = sub.add_parser("evaluate", help="per-user Spearman report")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--profiles", type=Path, nargs="*")
    s.add_argument("--global", dest="global_rho", action="store_true")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("enhance", help="gradient-ascent enhancement of one image")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--profile", type=Path)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--output", type=Path, required=True)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--steps", type=int, default=1)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("suite", help="run several regimes over all test users")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--regimes", help="comma-separated; default: all table rows")
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_suite)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 3
    except (ProfileMismatch, FormatError, D.ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
