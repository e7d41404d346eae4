"""Command-line entry point.

One binary with subcommands: distill, finetune, eval, sweep, ablate, attn,
gradcheck. Every run directory receives a manifest recording the command,
the config snapshot, input checkpoint hashes, output paths, and duration,
so runs are replayable. Exit codes: 1 config error, 2 data error,
3 numerical error. Diagnostics go to stderr; stdout carries
machine-readable JSON only when --json is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import uuid
from pathlib import Path

import torch

from . import data as data_mod
from . import encoder, evaluation, gradcheck, trainer
from .distortions import DistortionSpec
from .encoder import ViTConfig
from .errors import ConfigError, DataError, DstlError, NumericalError, ParameterError
from .trainer import TrainConfig, TrainMode

PRESETS = {
    # 25 epochs / batch 128 / peak lr 1e-5 / weight decay 1e-4
    "paper": {"epochs": 25, "batch_size": 128, "peak_lr": 1e-5, "weight_decay": 1e-4,
              "warmup_frac": 0.0},
    "desk": {"epochs": 30, "batch_size": 64},
}

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config_snapshot: dict,
                    input_ckpts: dict, outputs: list, started: float) -> None:
    manifest = {
        "run_id": uuid.uuid4().hex,
        "command": command,
        "config": config_snapshot,
        "input_checkpoints": {str(k): v for k, v in input_ckpts.items()},
        "outputs": [str(p) for p in outputs],
        "duration_seconds": time.time() - started,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _load_run_config(args) -> dict:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _train_config(cfg: dict, args) -> TrainConfig:
    train = dict(cfg.get("train", {}))
    if getattr(args, "preset", None):
        train.update(PRESETS[args.preset])
    tc = TrainConfig.from_json(train)
    seed = os.environ.get("DSTL_SEED")
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        from dataclasses import replace
        tc = replace(tc, seed=int(seed))
    if getattr(args, "deterministic", False):
        from dataclasses import replace
        tc = replace(tc, deterministic=True)
    return tc


def _load_dataset(spec: dict):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("dataset spec must be an object with a 'kind'")
    if spec["kind"] == "synth":
        return data_mod.synth_shapes(
            n=int(spec.get("n", 1000)),
            num_classes=int(spec.get("num_classes", 10)),
            image_size=int(spec.get("image_size", 32)),
            seed=int(spec.get("seed", 0)),
        )
    if spec["kind"] == "cifar":
        path = spec.get("path")
        if path is None or not Path(path).exists():
            raise DataError(f"dataset path missing or not found: {path}")
        samples = data_mod.load_cifar_binary(path)
        limit = spec.get("limit")
        return samples[: int(limit)] if limit else samples
    raise ConfigError(f"unknown dataset kind {spec['kind']!r}")


def _vit_config(cfg: dict) -> ViTConfig:
    return ViTConfig.from_json(cfg.get("vit", {}))


def _resolve_params(cfg: dict, key: str, vit: ViTConfig, fallback_seed: int):
    path = cfg.get(key)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"checkpoint not found: {path}")
        params, ckpt_cfg = encoder.load_checkpoint(path)
        return params, ckpt_cfg, {path: _sha256(Path(path))}
    return encoder.init_params(vit, fallback_seed), vit, {}


# --- subcommands --------------------------------------------------------------


def cmd_distill(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    tc = _train_config(cfg, args)
    vit = _vit_config(cfg)
    train_set = _load_dataset(cfg.get("data", {}).get("train", cfg.get("data", {})))
    teacher, t_cfg, hashes = _resolve_params(cfg, "teacher_ckpt", vit, int(cfg.get("init_seed", tc.seed)))
    if "teacher_ckpt" in cfg:
        vit = t_cfg  # checkpoint config wins when a teacher checkpoint is given
    student, _, s_hashes = _resolve_params(cfg, "student_ckpt", vit, int(cfg.get("init_seed", tc.seed)))
    hashes.update(s_hashes)
    if "student_ckpt" not in cfg and "teacher_ckpt" in cfg:
        student = encoder.clone_params(teacher)  # shared init with the teacher

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    student, records = trainer.distill_run(teacher, student, vit, tc, train_set, out_dir=out)
    outputs = sorted(str(p) for p in out.glob("*.ckpt")) + [str(out / "metrics.jsonl")]
    _write_manifest(out, "distill", {"train": tc.to_json(), "vit": vit.to_json()},
                    hashes, outputs, started)
    if args.json:
        print(json.dumps({"out": str(out), "steps": len(records),
                          "final_loss": records[-1]["loss_total"] if records else None}))
    return 0


def cmd_finetune(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    tc = _train_config(cfg, args)
    vit = _vit_config(cfg)
    train_set = _load_dataset(cfg.get("data", {}).get("train", cfg.get("data", {})))
    num_classes = int(cfg.get("num_classes", 10))
    ckpt = args.ckpt or cfg.get("student_ckpt")
    if ckpt is None:
        params = encoder.init_params(vit, int(cfg.get("init_seed", tc.seed)))
        hashes = {}
    else:
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        params, vit = encoder.load_checkpoint(ckpt)
        hashes = {ckpt: _sha256(Path(ckpt))}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, mcfg, records = trainer.finetune_run(
        params, vit, tc, train_set, num_classes,
        label_fraction=args.label_fraction, out_dir=out,
    )
    outputs = sorted(str(p) for p in out.glob("*.ckpt")) + [str(out / "metrics.jsonl")]
    _write_manifest(out, "finetune", {"train": tc.to_json(), "vit": mcfg.to_json(),
                                      "label_fraction": args.label_fraction},
                    hashes, outputs, started)
    if args.json:
        print(json.dumps({"out": str(out), "steps": len(records)}))
    return 0


def _eval_inputs(args):
    cfg = _load_run_config(args)
    test_set = _load_dataset(cfg.get("data", {}).get("test", cfg.get("data", {})))
    if not Path(args.ckpt).exists():
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    params, vit = encoder.load_checkpoint(args.ckpt)
    return cfg, test_set, params, vit


def cmd_eval(args) -> int:
    started = time.time()
    cfg, test_set, params, vit = _eval_inputs(args)
    spec = DistortionSpec.from_json(args.distortion)
    report = evaluation.top1(params, vit, test_set, spec, realizations=args.realizations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    _write_manifest(out, "eval", {"distortion": spec.to_json(),
                                  "realizations": args.realizations},
                    {args.ckpt: _sha256(Path(args.ckpt))}, [str(out / "report.json")], started)
    if args.json:
        print(json.dumps(report.to_json()))
    else:
        print(evaluation.render_table({"model": report}), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    values = [float(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.axis == "severity":
        cfg, test_set, params, vit = _eval_inputs(args)
        base = DistortionSpec.from_json(args.distortion) if args.distortion else \
            DistortionSpec(kind={"mask": "mask", "noise": "noise", "blur": "blur"}[args.kind])
        result = evaluation.severity_sweep(params, vit, test_set, base, values,
                                           realizations=args.realizations)
        hashes = {args.ckpt: _sha256(Path(args.ckpt))}
    else:
        cfg = _load_run_config(args)
        tc = _train_config(cfg, args)
        vit = _vit_config(cfg)
        train_set = _load_dataset(cfg["data"]["train"])
        test_set = _load_dataset(cfg["data"]["test"])
        student, _ = encoder.load_checkpoint(args.ckpt)
        baseline, _ = encoder.load_checkpoint(args.baseline_ckpt)
        result = evaluation.label_fraction_sweep(
            student, baseline, vit, values, tc, train_set, test_set,
            num_classes=int(cfg.get("num_classes", 10)), realizations=args.realizations,
        )
        hashes = {args.ckpt: _sha256(Path(args.ckpt)),
                  args.baseline_ckpt: _sha256(Path(args.baseline_ckpt))}
    (out / "sweep.json").write_text(json.dumps(result.to_json(), indent=2))
    _write_manifest(out, "sweep", {"axis": args.axis, "values": values},
                    hashes, [str(out / "sweep.json")], started)
    if args.json:
        print(json.dumps(result.to_json()))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _load_run_config(args)
    tc = _train_config(cfg, args)
    vit = _vit_config(cfg)
    train_set = _load_dataset(cfg["data"]["train"])
    test_set = _load_dataset(cfg["data"]["test"])
    num_classes = int(cfg.get("num_classes", 10))
    arms = [a.strip() for a in args.arms.split(",")]
    alias = {"global+attention": "global+attn", "global+local+attn": "full",
             "global+local+attention": "full"}
    arms = [alias.get(a, a) for a in arms]
    teacher, t_cfg, hashes = _resolve_params(cfg, "teacher_ckpt", vit, int(cfg.get("init_seed", tc.seed)))
    if "teacher_ckpt" in cfg:
        vit = t_cfg
    student_init = encoder.clone_params(teacher)
    from dataclasses import replace
    ft_cfg = TrainConfig.from_json(dict(cfg.get("finetune", cfg.get("train", {}))))
    ft_cfg = replace(ft_cfg, distortion=tc.distortion, seed=tc.seed, mode=TrainMode.FINETUNE)
    results = evaluation.ablation_suite(
        teacher, student_init, vit, tc, ft_cfg, train_set, test_set,
        num_classes=num_classes, arms=arms,
        label_fraction=float(cfg.get("label_fraction", 1.0)),
        realizations=args.realizations,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps({k: v.to_json() for k, v in results.items()}, indent=2))
    table = evaluation.render_table(results)
    (out / "ablation.txt").write_text(table + "\n")
    _write_manifest(out, "ablate", {"arms": arms, "train": tc.to_json()}, hashes,
                    [str(out / "ablation.json"), str(out / "ablation.txt")], started)
    if args.json:
        print(json.dumps({k: v.to_json() for k, v in results.items()}))
    else:
        print(table, file=sys.stderr)
    return 0


def cmd_attn(args) -> int:
    started = time.time()
    cfg, test_set, params, vit = _eval_inputs(args)
    spec = DistortionSpec.from_json(args.distortion)
    img = test_set[args.index].image
    out = Path(args.out)
    paths = evaluation.export_attention(params, vit, img, spec, out)
    _write_manifest(out, "attn", {"distortion": spec.to_json(), "index": args.index},
                    {args.ckpt: _sha256(Path(args.ckpt))},
                    [str(p) for p in paths.values()], started)
    if args.json:
        print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run_gradcheck(
        depth=args.depth, dim=args.dim, heads=args.heads,
        tolerance=args.tolerance, flip_sign_of=args.inject_fault,
    )
    for name, err in sorted(result.per_tensor_max_rel.items()):
        print(f"{name:<28} {err:.3e}", file=sys.stderr)
    summary = {"max_rel_error": result.max_rel, "tolerance": result.tolerance,
               "passed": result.passed}
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"gradcheck: max rel error {result.max_rel:.3e} "
              f"(tolerance {result.tolerance:g}) -> {'PASS' if result.passed else 'FAIL'}",
              file=sys.stderr)
    return 0 if result.passed else EXIT_NUMERICAL


# --- argument parsing ----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, config=True):
    if config:
        p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--json", action="store_true",
                   help="print machine-readable results on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstl",
                                     description="Distortion-robust encoder distillation")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("distill", help="run teacher-student distillation")
    _add_common(p)
    p.set_defaults(fn=cmd_distill, needs_out=True)

    p = sub.add_parser("finetune", help="supervised fine-tuning of an encoder")
    _add_common(p)
    p.add_argument("--ckpt", help="encoder checkpoint to start from")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.set_defaults(fn=cmd_finetune, needs_out=True)

    p = sub.add_parser("eval", help="top-1 accuracy under a distortion")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--distortion", required=True, help="DistortionSpec JSON")
    p.add_argument("--realizations", type=int, default=10)
    p.set_defaults(fn=cmd_eval, needs_out=True)

    p = sub.add_parser("sweep", help="severity or label-fraction sweep")
    _add_common(p)
    p.add_argument("--axis", choices=["severity", "label_fraction"], required=True)
    p.add_argument("--kind", choices=["mask", "noise", "blur"], default="mask")
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline-ckpt", help="baseline checkpoint (label_fraction axis)")
    p.add_argument("--distortion", help="base DistortionSpec JSON (severity axis)")
    p.add_argument("--realizations", type=int, default=10)
    p.set_defaults(fn=cmd_sweep, needs_out=True)

    p = sub.add_parser("ablate", help="loss-component ablation harness")
    _add_common(p)
    p.add_argument("--arms", default="global,global+local,global+attn,full")
    p.add_argument("--realizations", type=int, default=10)
    p.set_defaults(fn=cmd_ablate, needs_out=True)

    p = sub.add_parser("attn", help="export attention maps as PGM")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--distortion", required=True)
    p.add_argument("--index", type=int, default=0, help="test image index")
    p.set_defaults(fn=cmd_attn, needs_out=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    _add_common(p, config=False)
    p.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--inject-fault", metavar="TENSOR", default=None,
                   help=argparse.SUPPRESS)  # test hook: sign-flip one gradient
    p.set_defaults(fn=cmd_gradcheck, needs_out=False)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "needs_out", False) and args.out is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        torch.set_num_threads(max(1, args.threads))
    try:
        return args.fn(args)
    except (ConfigError, ParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DstlError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
