"""Command-line front end.

Subcommands: synth, pretrain, metatrain, eval, merge, verify. JSON config
files supply defaults section by section; explicit flags beat the file,
the file beats built-in defaults. One run seed feeds every stage (scene
rendering, model init, episode streams, evaluation), so a config replays
bit-identically.

Exit codes: 0 success, 1 failed checks, 2 training failure, 64 bad usage
or config, 66 missing or unreadable input.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SAMPLERS, SyntheticConfig, SyntheticIndex, make_folds
from .errors import (ConfigError, IngestionError, ProtocolError,
                     SamplingError, TrainingError)
from .lora import STRATEGIES, merge_all
from .model import FewShotSegmenter, ModelConfig
from .train import JsonlLogger, TrainConfig, meta_train, pretrain_base

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_TRAINING = 2
EXIT_USAGE = 64
EXIT_NOINPUT = 66

_TOP_KEYS = {"model", "synth", "train", "eval", "fold", "n_folds", "seed",
             "images_per_class"}
_EVAL_KEYS = {"K", "n_episodes", "sampler", "jobs"}


@dataclasses.dataclass
class Profile:
    model: ModelConfig
    synth: SyntheticConfig
    train: TrainConfig
    fold: int = 0
    n_folds: int = 4
    seed: int = 0
    images_per_class: int = 8
    K: int = 1
    n_episodes: int = 200
    sampler: str = "class_first"
    jobs: int = 1

    def folds(self):
        return make_folds(self.synth.class_ids(), self.n_folds)


def _section(raw: dict, name: str, allowed: set) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in config section '{name}'")
    return dict(section)


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def load_profile(config_path=None, **overrides) -> Profile:
    """Assemble the run profile: flag > config file > default."""
    raw = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise IngestionError(f"config file '{path}' not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file '{path}' is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = sorted(set(raw) - _TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown top-level config keys {unknown}")

    model_kw = _section(raw, "model", _fields(ModelConfig))
    synth_kw = _section(raw, "synth", _fields(SyntheticConfig) - {"seed"})
    train_kw = _section(raw, "train", _fields(TrainConfig) - {"seed"})
    eval_kw = _section(raw, "eval", _EVAL_KEYS)

    top = {k: raw[k] for k in ("fold", "n_folds", "seed", "images_per_class")
           if k in raw}
    flat = {**eval_kw, **top}
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "strategy":
            train_kw["strategy"] = value
        elif key == "train_episodes":
            train_kw["episodes_per_epoch"] = value
        elif key == "episodes":
            flat["n_episodes"] = value
        else:
            flat[key] = value

    seed = int(flat.pop("seed", 0))
    try:
        profile = Profile(
            model=ModelConfig(**model_kw),
            synth=SyntheticConfig(seed=seed, **synth_kw),
            train=TrainConfig(seed=seed, **train_kw),
            seed=seed,
            **flat,
        )
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    if profile.sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler '{profile.sampler}'")
    if not 0 <= profile.fold < profile.n_folds:
        raise ConfigError(f"fold {profile.fold} outside 0..{profile.n_folds - 1}")
    if profile.model.image_size != profile.synth.image_size:
        raise ConfigError(f"model image_size {profile.model.image_size} != "
                          f"synth image_size {profile.synth.image_size}")
    return profile


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _new_model(profile: Profile) -> FewShotSegmenter:
    return FewShotSegmenter(profile.model, np.random.default_rng(profile.seed))


def _load_model(path):
    from .checkpoint import load_checkpoint
    return load_checkpoint(Path(path))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import save_dataset
    profile = load_profile(args.config, seed=args.seed,
                           images_per_class=args.images_per_class)
    out = _out_dir(args.out)
    index = save_dataset(out, profile.synth, profile.images_per_class)
    total = sum(len(index.images_of(c)) for c in index.classes)
    print(f"wrote {total} images over {len(index.classes)} classes to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    profile = load_profile(args.config, seed=args.seed, fold=args.fold,
                           train_episodes=args.episodes)
    out = _out_dir(args.out)
    classes = profile.folds().train_classes(profile.fold)
    model = _new_model(profile)
    log = JsonlLogger(out / "pretrain.jsonl")
    result = pretrain_base(model, profile.synth, profile.train, classes, log=log)
    from .checkpoint import save_checkpoint
    save_checkpoint(out / "base.ckpt", model, extras={
        "stage": "pretrain", "fold": profile.fold, "n_folds": profile.n_folds,
        "seed": profile.seed, "best_epoch": result.best_epoch,
    })
    print(f"pretrained on {len(classes)} classes; best epoch "
          f"{result.best_epoch}; checkpoint {out / 'base.ckpt'}")
    return EXIT_OK


def cmd_metatrain(args) -> int:
    profile = load_profile(args.config, seed=args.seed, fold=args.fold,
                           strategy=args.strategy, train_episodes=args.episodes)
    out = _out_dir(args.out)
    model, _ = _load_model(args.ckpt)
    if model.cfg != profile.model:
        raise ConfigError(f"checkpoint model {model.cfg} does not match "
                          f"configured model {profile.model}")
    folds = profile.folds()
    log = JsonlLogger(out / "metatrain.jsonl")
    result = meta_train(model, profile.train.strategy, profile.synth,
                        profile.train, folds.train_classes(profile.fold),
                        folds.test_classes(profile.fold), log=log,
                        images_per_class=profile.images_per_class)
    from .checkpoint import save_checkpoint
    save_checkpoint(out / "meta.ckpt", model, extras={
        "stage": "metatrain", "strategy": profile.train.strategy,
        "fold": profile.fold, "n_folds": profile.n_folds,
        "seed": profile.seed, "best_epoch": result.best_epoch,
    })
    if result.warning:
        print(f"notice: {result.warning}")
    else:
        print(f"meta-trained [{profile.train.strategy}]; best held-out mIoU "
              f"{-result.best_metric:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint {out / 'meta.ckpt'}")
    return EXIT_OK


def _predictor_for(ckpt: str, profile: Profile):
    if ckpt == "oracle":
        return lambda image, support, truth: truth
    if ckpt == "blank":
        return lambda image, support, truth: np.zeros_like(truth, dtype=bool)
    model, _ = _load_model(ckpt)
    if model.cfg.image_size != profile.synth.image_size:
        raise ConfigError(f"checkpoint expects {model.cfg.image_size}px images, "
                          f"synth config renders {profile.synth.image_size}px")
    return model


def cmd_eval(args) -> int:
    from .evaluation import (evaluate_domain_shift, evaluate_fold,
                             evaluate_identity_support)
    profile = load_profile(args.config, seed=args.seed, fold=args.fold,
                           K=args.K, episodes=args.episodes, jobs=args.jobs,
                           sampler=args.sampler)
    out = _out_dir(args.out)
    predictor = _predictor_for(args.ckpt, profile)
    folds = profile.folds()
    test_classes = folds.test_classes(profile.fold)

    if args.mode == "standard":
        index = SyntheticIndex(profile.synth, profile.images_per_class)
        report = evaluate_fold(predictor, index, test_classes, profile.K,
                               profile.n_episodes, sampler=profile.sampler,
                               seed=profile.seed, jobs=profile.jobs)
    elif args.mode == "identity":
        index = SyntheticIndex(profile.synth, profile.images_per_class)
        report = evaluate_identity_support(predictor, index, test_classes,
                                           profile.n_episodes,
                                           sampler=profile.sampler,
                                           seed=profile.seed, jobs=profile.jobs)
    else:
        shifted = replace(profile.synth,
                          background_id=1 - profile.synth.background_id)
        index = SyntheticIndex(shifted, profile.images_per_class)
        report = evaluate_domain_shift(predictor, index,
                                       folds.train_classes(profile.fold),
                                       test_classes, profile.K,
                                       profile.n_episodes,
                                       sampler=profile.sampler,
                                       seed=profile.seed, jobs=profile.jobs)

    report.meta["fold"] = profile.fold
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    miou = report.miou()
    print("mIoU undefined" if miou is None else f"mIoU {miou:.4f}")
    return EXIT_OK


def cmd_merge(args) -> int:
    from .checkpoint import checkpoint_is_factored, save_checkpoint
    out = _out_dir(args.out)
    target = out / "merged.ckpt"
    if not checkpoint_is_factored(args.ckpt):
        if Path(args.ckpt).resolve() != target.resolve():
            shutil.copyfile(args.ckpt, target)
        print(f"notice: {args.ckpt} is already merged; copied unchanged")
        return EXIT_OK
    model, extras = _load_model(args.ckpt)
    merge_all(model)
    save_checkpoint(target, model, extras=extras)
    print(f"merged adapters into base weights: {target}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks
    failures = run_checks()
    return EXIT_CHECK if failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p, *, out_required=True):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memseg",
                     description="few-shot segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    _add_common(p)
    p.add_argument("--images-per-class", type=int, default=None,
                   dest="images_per_class")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="train all parameters on video-like episodes")
    _add_common(p)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None,
                   help="episodes per training epoch")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("metatrain", help="adapt a pretrained model episodically")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None,
                   help="episodes per training epoch")
    p.set_defaults(fn=cmd_metatrain)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True,
                   help="checkpoint path, or 'oracle' / 'blank' baselines")
    p.add_argument("--mode", choices=("standard", "identity", "shift"),
                   default="standard")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--K", type=int, default=None, help="support images per episode")
    p.add_argument("--episodes", type=int, default=None,
                   help="number of evaluation episodes")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")
    p.add_argument("--sampler", choices=sorted(SAMPLERS), default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("merge", help="fold adapters into base weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("verify", help="run the built-in integrity checks")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, ProtocolError, SamplingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOINPUT
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
