"""Command-line entry point: ``priornet <command> ...``.

Exit codes: 0 success, 2 validation failure (bad arguments, configs or
inputs, or a failed gradient check), 1 any other runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbone import load_checkpoint, save_checkpoint
from .clip_pipeline import (
    assemble_clip,
    load_frame_directory,
    plan_frame_indices,
    read_dataset,
    read_detection_sidecar,
    write_clip,
    write_dataset,
)
from .harness.experiments import missingness_diagnostic, run_ablation, with_seed
from .harness.training import Dataset, TrainConfig, evaluate, load_dataset, train
from .objective import gradient_check
from .synth_data import SynthSpec, generate_dataset

log = logging.getLogger("priornet")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _dump(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_preprocess(args) -> int:
    frames = load_frame_directory(args.frames)
    detections = read_detection_sidecar(args.sidecar)
    plan = plan_frame_indices(len(frames), args.clip_length)
    clip, meta = assemble_clip(frames, detections, plan, args.size, label=args.label,
                               subject_id=args.subject)
    write_clip(args.out, clip, meta)
    _dump(meta.to_dict(), None)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    clips, metas = generate_dataset(spec)
    out = Path(args.out)
    write_dataset(out, clips, metas)
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _dump({"clips": len(clips), "out": str(out)}, None)
    return EXIT_OK


def _eval_subset(dataset: Dataset, eval_subjects) -> Dataset:
    keep = [i for i, m in enumerate(dataset.metas) if m.subject_id in set(eval_subjects)]
    return dataset.subset(keep)


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    dataset = load_dataset(config)
    result = train(config, dataset)
    held = dataset.subset(result.eval_idx)
    eval_subjects = sorted({m.subject_id for m in held.metas})
    save_checkpoint(result.model, args.out, extra={
        "train_config": config.to_dict(),
        "eval_subjects": eval_subjects,
        "history": result.history,
        "frozen_checksum": result.checksum,
    })
    report = evaluate(result.model, held.clips, held.metas).to_dict()
    if args.report:
        _dump(report, args.report)
    if args.history:
        _dump(result.history, args.history)
    _dump({"checkpoint": args.out, "frozen_checksum": result.checksum,
           "final_loss": result.history[-1], "eval": {"accuracy": report["accuracy"],
                                                      "weighted_f1": report["weighted_f1"]}}, None)
    return EXIT_OK


def _load_eval_data(path, extra: dict, split: str) -> Dataset:
    dataset = Dataset(*read_dataset(path))
    if split == "eval":
        if "eval_subjects" not in extra:
            raise ValueError("checkpoint records no evaluation subjects; use --split all")
        dataset = _eval_subset(dataset, extra["eval_subjects"])
    return dataset


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.ckpt)
    dataset = _load_eval_data(args.data, extra, args.split)
    _dump(evaluate(model, dataset.clips, dataset.metas).to_dict(), args.report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = TrainConfig.load(args.config)
    grid = []
    for k in range(args.seeds):
        seed = base.seed + k
        cfg = with_seed(base, seed)
        rows = run_ablation(cfg)
        grid.append({"seed": seed, "rows": [r.to_dict() for r in rows]})
    _dump({"seeds": grid}, args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model_a, extra = load_checkpoint(args.ckpt_a)
    model_b, _ = load_checkpoint(args.ckpt_b)
    dataset = _load_eval_data(args.data, extra, args.split)
    report = missingness_diagnostic(model_a, model_b, dataset.clips, dataset.metas)
    _dump(report.to_dict(), args.report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(trials=args.trials, seed=args.seed, h=args.h)
    _dump(report.to_dict(), None)
    return EXIT_OK if report.max_rel_error < args.tol else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priornet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="frames + detection sidecar -> one clip file")
    p.add_argument("--frames", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-length", type=int, default=16)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--label", type=int, default=-1)
    p.add_argument("--subject", default="")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic clip dataset")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train adapters + head from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write held-out metrics JSON here")
    p.add_argument("--history", help="write per-epoch loss breakdown JSON here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a clip directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--split", choices=("all", "eval"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="eight-way component ablation over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="per-missingness-group accuracy of two checkpoints")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--split", choices=("all", "eval"), default="all")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="objective gradient vs central differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
