"""``lrdistill`` command line: synthetic data, both training stages, the three
evaluation protocols, the four-arm ablation and the gradient oracle.

Exit codes: 0 success, 1 verification failure, 2 usage or precondition
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional

from . import __version__
from .ablation import ARMS, run_ablation
from .config import RunConfig, load_run_config
from .data import (
    checkpoint_load,
    load_images,
    load_manifest,
    read_teacher_store,
    synth_generate,
)
from .data.formats import _atomic_write
from .evaluation import VerificationSet, build_pairs, embed_all, identify_finetune, retrieve, verify
from .exceptions import BackboneDriftError, LRDistillError, NumericalError, PreconditionError
from .gradcheck import CASES, run_suite
from .model import StudentModel
from .train import LOSS_COMPONENTS, TrainLog, restore, train_stage1, train_stage2

logger = logging.getLogger("lrdistill")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
DEGRADATION = "box-average"

BACKBONE_CKPT, HEAD_CKPT = "backbone.gckp", "head.gckp"


class UsageError(PreconditionError):
    pass


# ---------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def _inputs(**paths) -> dict:
    # basenames only: run metadata must not depend on where the run directory lives
    return {k: {"file": os.path.basename(p), "sha256": sha256_file(p)} for k, p in paths.items() if p}


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, overrides)


def _load(manifest_path: str, cfg: RunConfig, num_classes: Optional[int] = None):
    manifest = load_manifest(manifest_path)
    return manifest, load_images(manifest, side=cfg["input_side"], num_classes=num_classes)


def _model_from_checkpoint(path: str, cfg: RunConfig):
    ckpt = checkpoint_load(path, cfg.model())
    model = StudentModel(cfg.model(), int(ckpt.meta["num_classes"]), seed=int(ckpt.meta.get("seed", cfg["seed"])))
    restore(model, ckpt)
    return model, ckpt


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    summary = synth_generate(args.classes, args.per_class, args.seed, args.out,
                             test_per_class=args.test_per_class, class_weight=args.class_weight)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _log_summary(log: TrainLog, stage: int, key: str) -> str:
    means = log.epoch_means(stage, key)
    return f"{key} {means[0]:.5f} -> {means[-1]:.5f} over {len(means)} epochs" if means else f"{key}: no steps"


def cmd_train_backbone(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out)
    manifest, data = _load(args.manifest, cfg)
    store = read_teacher_store(args.gen_store)
    model = StudentModel(cfg.model(), manifest.num_classes, seed=cfg["seed"])
    log = TrainLog()
    ckpt_path = os.path.join(out, BACKBONE_CKPT)
    train_stage1(model, data, store, cfg.optim(), log, checkpoint_path=ckpt_path)
    log.write(os.path.join(out, "backbone_log.jsonl"))
    write_json(os.path.join(out, "backbone_meta.json"), {
        "command": "train-backbone",
        "config": cfg.to_dict(),
        "inputs": _inputs(manifest=args.manifest, gen_store=args.gen_store),
        "outputs": {"checkpoint": BACKBONE_CKPT, "log": "backbone_log.jsonl",
                    "checkpoint_sha256": sha256_file(ckpt_path)},
        "degradation": DEGRADATION,
        "prng": "PCG64",
    })
    print(f"stage 1: {_log_summary(log, 1, 'l_gen')}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_train_head(args) -> int:
    if bool(args.backbone) == bool(args.from_seed):
        raise UsageError("train-head needs exactly one of --backbone CHECKPOINT or --from-seed")
    overrides = {"loss": args.loss} if args.loss else {}
    cfg = _run_config(args).updated(overrides)
    out = _out_dir(args.out)
    manifest, data = _load(args.manifest, cfg)
    store = read_teacher_store(args.disc_store)
    model = StudentModel(cfg.model(), manifest.num_classes, seed=cfg["seed"])
    stage1 = checkpoint_load(args.backbone, cfg.model()) if args.backbone else None
    log = TrainLog()
    ckpt_path = os.path.join(out, HEAD_CKPT)
    train_stage2(model, stage1, data, store, cfg.optim(), cfg["loss"], log, checkpoint_path=ckpt_path)
    log.write(os.path.join(out, "head_log.jsonl"))
    write_json(os.path.join(out, "head_meta.json"), {
        "command": "train-head",
        "config": cfg.to_dict(),
        "inputs": _inputs(manifest=args.manifest, disc_store=args.disc_store, backbone=args.backbone),
        "backbone_source": "stage1" if stage1 is not None else "seed",
        "loss": list(cfg["loss"]),
        "outputs": {"checkpoint": HEAD_CKPT, "log": "head_log.jsonl", "checkpoint_sha256": sha256_file(ckpt_path)},
        "degradation": DEGRADATION,
        "prng": "PCG64",
    })
    print(f"stage 2 ({','.join(cfg['loss'])}): {_log_summary(log, 2, 'l_dis')}; checkpoint {ckpt_path}")
    return EXIT_OK


def _report_out(report, args, **inputs) -> None:
    report.meta.update({"inputs": _inputs(**inputs), "degradation": DEGRADATION})
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        write_json(args.out, report.to_dict())


def cmd_eval_verify(args) -> int:
    cfg = _run_config(args)
    model, _ = _model_from_checkpoint(args.checkpoint, cfg)
    manifest, data = _load(args.manifest, cfg)
    if args.pairs:
        pairs = VerificationSet.load(args.pairs)
    else:
        pairs = build_pairs(data.ids, data.labels, cfg["n_pos"], cfg["n_neg"], cfg["pair_seed"])
    if args.save_pairs:
        pairs.save(args.save_pairs)
    report = verify(embed_all(model, data), pairs)
    report.meta["pairs_sha256"] = pairs.digest()
    _report_out(report, args, checkpoint=args.checkpoint, manifest=args.manifest, pairs=args.pairs)
    print(f"verification accuracy {report.accuracy:.4f} at threshold {report.to_dict()['threshold']} "
          f"({report.counts['positive']} positive / {report.counts['negative']} negative pairs)")
    return EXIT_OK


def cmd_eval_retrieve(args) -> int:
    cfg = _run_config(args)
    if args.ranks:
        cfg = cfg.updated({"ranks": args.ranks})
    model, _ = _model_from_checkpoint(args.checkpoint, cfg)
    _, gallery = _load(args.gallery, cfg)
    _, probes = _load(args.probes, cfg)
    report = retrieve(embed_all(model, gallery), embed_all(model, probes), cfg["ranks"])
    _report_out(report, args, checkpoint=args.checkpoint, gallery=args.gallery, probes=args.probes)
    shown = " ".join(f"rank-{k}={v:.4f}" for k, v in report.rank_accuracy.items())
    print(f"retrieval {shown} ({report.counts['probes']} probes, gallery {report.counts['gallery']})")
    return EXIT_OK


def cmd_eval_identify(args) -> int:
    cfg = _run_config(args)
    model, _ = _model_from_checkpoint(args.checkpoint, cfg)
    _, train = _load(args.train, cfg)
    _, test = _load(args.test, cfg)
    report = identify_finetune(model, train, test, cfg.finetune())
    _report_out(report, args, checkpoint=args.checkpoint, train=args.train, test=args.test)
    print(f"identification top-1 {report.accuracy:.4f} over {report.counts['classes']} classes")
    return EXIT_OK


def _fixture_paths(args) -> dict:
    names = {"train_manifest": "train_manifest.json", "test_manifest": "test_manifest.json",
             "gen_store": "gen_teacher.gten", "disc_store": "disc_teacher.gten"}
    paths = {}
    for key, default in names.items():
        given = getattr(args, key)
        if given is None and args.fixture:
            given = os.path.join(args.fixture, default)
        if given is None:
            raise UsageError(f"--{key.replace('_', '-')} is required without --fixture")
        paths[key] = given
    return paths


def ordering_check(table: dict) -> dict:
    means = {a: v["mean"] for a, v in table["arms"].items()}
    if not all(a in means for a in ARMS):
        return {}
    return {
        "gen_dis_ge_dis": means["gen_dis"] >= means["dis"],
        "dis_ge_wo_dist": means["dis"] >= means["wo_dist"],
        "gen_dis_minus_wo_dist": means["gen_dis"] - means["wo_dist"],
    }


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if args.seeds:
        cfg = cfg.updated({"ablation_seeds": args.seeds})
    paths = _fixture_paths(args)
    train_manifest = load_manifest(paths["train_manifest"])
    test_manifest = load_manifest(paths["test_manifest"])
    classes = max(train_manifest.num_classes, test_manifest.num_classes)
    train = load_images(train_manifest, side=cfg["input_side"], num_classes=classes)
    test = load_images(test_manifest, side=cfg["input_side"], num_classes=classes)
    arms = args.arms.split(",") if args.arms else tuple(ARMS)
    table = run_ablation(train, test, read_teacher_store(paths["gen_store"]), read_teacher_store(paths["disc_store"]),
                         seeds=cfg["ablation_seeds"], optim=cfg.optim(), model_config=cfg.model(),
                         n_pos=cfg["n_pos"], n_neg=cfg["n_neg"], pair_seed=cfg["pair_seed"], arms=arms)
    table["inputs"] = _inputs(**paths)
    table["ordering"] = ordering_check(table)
    if args.out:
        write_json(args.out, table)
    for arm, row in table["arms"].items():
        per_seed = " ".join(f"{s}:{a:.4f}" for s, a in row["accuracy"].items())
        print(f"{arm:<8s} mean={row['mean']:.4f}  {per_seed}")
    order = table["ordering"]
    if order:
        ok = order["gen_dis_ge_dis"] and order["dis_ge_wo_dist"] and order["gen_dis_minus_wo_dist"] >= 0.05
        print(f"ordering GEN+DIS>=DIS>=w/o DIST with gap {order['gen_dis_minus_wo_dist']:+.4f}: "
              f"{'holds' if ok else 'violated'}")
        if args.require_ordering and not ok:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.list:
        print("\n".join(CASES))
        return EXIT_OK
    if not (args.all or args.ops or args.negative_control):
        raise UsageError("gradcheck needs --all, one or more case names, or --negative-control")
    names = None if args.all else list(args.ops)
    seeds = [args.seed + k for k in range(args.seeds)]
    try:
        reports = run_suite(names, seeds=seeds, eps=args.eps, tol=args.tol, negative_control=args.negative_control)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed at tol {args.tol:g} (eps {args.eps:g}, "
          f"{len(seeds)} seed(s) from {args.seed})")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def _seed_list(text: str):
    return tuple(int(s) for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrdistill", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic fixture")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--test-per-class", type=int, default=0, help="hold out the last k samples of each class")
    p.add_argument("--class-weight", type=float, default=None, help="share of class-specific structure in templates")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-backbone", parents=[common], help="stage 1: backbone on the generative teacher")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gen-store", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-head", parents=[common], help="stage 2: head on the discriminative teacher")
    p.add_argument("--manifest", required=True)
    p.add_argument("--disc-store", required=True)
    p.add_argument("--backbone", help="stage-1 checkpoint")
    p.add_argument("--from-seed", action="store_true", help="keep the seeded backbone (no stage 1)")
    p.add_argument("--loss", type=lambda s: tuple(x for x in s.split(",") if x),
                   help=f"comma-separated subset of {','.join(LOSS_COMPONENTS)}")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("eval-verify", parents=[common], help="pair verification at the optimal threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs", help="JSON pair file; built from the manifest when omitted")
    p.add_argument("--save-pairs")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval_verify)

    p = sub.add_parser("eval-retrieve", parents=[common], help="1:N retrieval rank-k accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--ranks", type=_seed_list)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_retrieve)

    p = sub.add_parser("eval-identify", parents=[common], help="fresh softmax layer on frozen embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_identify)

    p = sub.add_parser("ablate", parents=[common], help="four-arm ablation table")
    p.add_argument("--fixture", help="directory written by synth --test-per-class")
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--gen-store")
    p.add_argument("--disc-store")
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--arms", help=f"comma-separated subset of {','.join(ARMS)}")
    p.add_argument("--require-ordering", action="store_true", help="exit 1 when the arm ordering does not hold")
    p.add_argument("--out", help="table JSON path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    p.add_argument("ops", nargs="*", help="case names (see --list)")
    p.add_argument("--all", action="store_true")
    p.add_argument("--list", action="store_true")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds per case")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--negative-control", action="store_true", help="add a deliberately broken op (must fail)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def exit_code_for(exc: BaseException) -> int:
    while exc is not None:
        if isinstance(exc, NumericalError):
            return EXIT_NUMERIC
        if isinstance(exc, BackboneDriftError):
            return EXIT_VERIFY
        if isinstance(exc, (LRDistillError, OSError)):
            return EXIT_USAGE
        exc = exc.__cause__
    return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and args.class_weight is None:
        from .data.synth import CLASS_WEIGHT

        args.class_weight = CLASS_WEIGHT
    try:
        return args.func(args)
    except (LRDistillError, OSError) as exc:
        err = exc
    except RuntimeError as exc:
        # ablation wraps arm failures; anything else is a bug and propagates
        if not isinstance(exc.__cause__, (LRDistillError, OSError)):
            raise
        err = exc
    print(f"lrdistill {args.command}: error: {err}", file=sys.stderr)
    return exit_code_for(err)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
