"""Command-line pipeline driver.

Subcommands: gen-data, pretrain-teacher, train, finetune, convert, eval,
inspect, plot. Every subcommand accepts --config / --seed / --workdir;
flags override the config file, the config file overrides defaults, and
the SAVC_SEED environment variable is the lowest-priority seed source.

Exit codes: 0 success, 2 unknown subcommand or usage error, 3 config
parse error, 4 validation error. Failures print one machine-parsable
line: ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import convert as convert_mod
from . import evaluation, syndata, train as train_mod
from .config import ConfigError, RunConfig, apply_seed_overrides, default_config, dump_config, load_config
from .nets import Checkpoint, load_checkpoint, save_checkpoint
from .tensorio import (
    Corpus,
    ManifestError,
    TensorFormatError,
    load_manifest,
    read_tensor,
    split_holdout,
)

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_VALIDATION = 4


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fail(kind: str, message: str) -> None:
    message = " ".join(str(message).split())  # keep the error on one line
    print(f"error: {kind}: {message}", file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--workdir", default="run", help="artifact directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker count for parallel sections (default 1)")


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg, provided = load_config(args.config)
    else:
        cfg, provided = default_config(), set()
    env_seed = None
    if "SAVC_SEED" in os.environ:
        try:
            env_seed = int(os.environ["SAVC_SEED"])
        except ValueError as e:
            raise ConfigError(f"SAVC_SEED: {e}") from e
    return apply_seed_overrides(cfg, provided, args.seed, env_seed)


def _paths(args) -> dict[str, Path]:
    work = Path(args.workdir)
    return {
        "work": work,
        "corpus": work / "corpus",
        "manifest": work / "corpus" / "manifest.json",
        "teacher": work / "teacher",
        "main": work / "main",
        "finetuned": work / "finetuned",
        "logs": work / "logs",
        "converted": work / "converted",
    }


def _load_corpus(paths) -> Corpus:
    if not paths["manifest"].is_file():
        raise ManifestError(
            f"no corpus manifest at {paths['manifest']} (run gen-data first)"
        )
    return Corpus(load_manifest(paths["manifest"]))


def _load_stage(path: Path, stage: str) -> Checkpoint:
    if not (path / "meta.json").is_file():
        raise ManifestError(
            f"stage error: no {stage} checkpoint at {path} "
            f"(run the earlier pipeline stages first)"
        )
    return load_checkpoint(path)


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    paths = _paths(args)
    manifest = syndata.make_corpus(cfg.data, paths["corpus"])
    print(f"wrote {len(manifest.utterances)} utterances to {paths['corpus']}")
    return 0


def _cmd_pretrain_teacher(args) -> int:
    cfg = _load_run_config(args)
    paths = _paths(args)
    corpus = _load_corpus(paths)
    paths["logs"].mkdir(parents=True, exist_ok=True)
    ckpt, _ = train_mod.pretrain_teacher(
        corpus, cfg.encoder_config(), cfg.train,
        log_path=paths["logs"] / "teacher_metrics.csv",
    )
    save_checkpoint(ckpt, paths["teacher"])
    print(f"teacher checkpoint at {paths['teacher']}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    paths = _paths(args)
    corpus = _load_corpus(paths)
    teacher = _load_stage(paths["teacher"], "teacher")
    paths["logs"].mkdir(parents=True, exist_ok=True)
    ckpt, _ = train_mod.train_main(
        corpus, teacher, cfg.train, log_path=paths["logs"] / "main_metrics.csv"
    )
    save_checkpoint(ckpt, paths["main"])
    print(f"main checkpoint at {paths['main']}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    paths = _paths(args)
    corpus = _load_corpus(paths)
    main_ckpt = _load_stage(paths["main"], "main")
    paths["logs"].mkdir(parents=True, exist_ok=True)
    ckpt, _ = train_mod.finetune(
        main_ckpt, corpus, cfg.train,
        log_path=paths["logs"] / "finetune_metrics.csv",
    )
    save_checkpoint(ckpt, paths["finetuned"])
    print(f"finetuned checkpoint at {paths['finetuned']}")
    return 0


def _pick_checkpoint(args, paths) -> Checkpoint:
    if args.checkpoint:
        return _load_stage(Path(args.checkpoint), "requested")
    for name in ("finetuned", "main"):
        if (paths[name] / "meta.json").is_file():
            return load_checkpoint(paths[name])
    raise ManifestError("stage error: no main or finetuned checkpoint in workdir")


def _cmd_convert(args) -> int:
    paths = _paths(args)
    corpus_manifest = load_manifest(paths["manifest"]) if paths["manifest"].is_file() else None
    if corpus_manifest is None:
        raise ManifestError(f"no corpus manifest at {paths['manifest']}")
    ckpt = _pick_checkpoint(args, paths)
    if args.pairs:
        pairs = json.loads(Path(args.pairs).read_text())
        result = convert_mod.batch_convert(
            corpus_manifest, [tuple(p) for p in pairs], ckpt,
            paths["converted"], jobs=args.jobs,
        )
        print(f"results manifest at {result}")
        return 0
    if not args.utterance or not args.target:
        raise ConfigError("convert needs --utterance and --target (or --pairs)")
    embedding = read_tensor(args.embedding) if args.embedding else None
    rec = corpus_manifest.record(args.utterance)
    out = Path(args.out) if args.out else paths["converted"] / (
        f"{rec.id}__to__{args.target}.mel.savt"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    req = convert_mod.ConversionRequest(
        source=rec,
        target_speaker=args.target,
        target_embedding=embedding,
        output_path=out,
    )
    convert_mod.convert(req, ckpt, corpus_manifest)
    print(f"converted mel at {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    paths = _paths(args)
    corpus = _load_corpus(paths)
    ckpt = _pick_checkpoint(args, paths)
    n_pairs = args.pairs_count if args.pairs_count is not None else cfg.eval.n_pairs
    _, holdout = split_holdout(corpus, cfg.train.holdout_fraction)
    pool = holdout or None
    pairs = evaluation.sample_pairs(corpus, n_pairs, cfg.eval.seed, indices=pool)
    report = evaluation.build_report(
        corpus, ckpt, pairs, seed=cfg.eval.seed,
        use_dtw=cfg.eval.use_dtw,
        exclude_first_channel=cfg.eval.exclude_first_channel,
    )
    paths["work"].mkdir(parents=True, exist_ok=True)
    report.write(paths["work"] / "report.json", paths["work"] / "report.csv")
    print(f"report at {paths['work'] / 'report.json'}")
    return 0


def _describe_tensor(path: Path) -> str:
    arr = read_tensor(path)
    return f"{path}: float32 tensor, shape {tuple(arr.shape)}"


def _describe_checkpoint(path: Path) -> str:
    ckpt = load_checkpoint(path)
    n_params = sum(int(np.prod(a.shape)) for a in ckpt.params.values())
    return (
        f"{path}: stage={ckpt.stage} steps={ckpt.step_count} "
        f"tensors={len(ckpt.params)} parameters={n_params}"
    )


def _cmd_inspect(args) -> int:
    if args.dump_config:
        cfg = _load_run_config(args)
        sys.stdout.write(dump_config(cfg))
        return 0
    if not args.path:
        raise ConfigError("inspect needs a path or --dump-config")
    path = Path(args.path)
    if path.is_dir():
        print(_describe_checkpoint(path))
    else:
        print(_describe_tensor(path))
    return 0


def _cmd_plot(args) -> int:
    evaluation.write_curves_svg(args.csv, args.out)
    print(f"curves at {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="train the prosody teacher")
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain_teacher)

    p = sub.add_parser("train", help="main training stage")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="emotion fine-tuning stage")
    _add_common(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("convert", help="voice conversion")
    _add_common(p)
    p.add_argument("--utterance", help="source utterance id")
    p.add_argument("--target", help="target speaker label")
    p.add_argument("--embedding", help="external speaker embedding tensor file")
    p.add_argument("--checkpoint", help="checkpoint directory override")
    p.add_argument("--out", help="output mel tensor path")
    p.add_argument("--pairs", help="JSON file of [utterance, target] pairs")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("eval", help="objective metric report")
    _add_common(p)
    p.add_argument("--pairs-count", type=int, help="number of random pairs")
    p.add_argument("--checkpoint", help="checkpoint directory override")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="describe tensor files and checkpoints")
    _add_common(p)
    p.add_argument("path", nargs="?", help="tensor file or checkpoint directory")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("plot", help="render a metrics CSV as SVG curves")
    _add_common(p)
    p.add_argument("--csv", required=True, help="metrics log from training")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=_cmd_plot)

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as e:
        _fail("config", e)
        return EXIT_CONFIG
    except (ManifestError, TensorFormatError, ValueError, KeyError,
            FileNotFoundError, NotADirectoryError) as e:
        _fail("validation", e)
        return EXIT_VALIDATION
    except OSError as e:
        _fail("io", e)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
