"""Evaluation procedures: top-1 accuracy under repeated distortion
realizations, severity and label-fraction sweeps, the loss-component
ablation harness, and attention-map export as binary PGM.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import distortions, encoder, trainer
from .data import LabeledImage
from .distill import DistillWeights
from .distortions import DistortionKind, DistortionSpec
from .encoder import ParamSet, ViTConfig
from .errors import ConfigError, InputError, ParameterError
from .trainer import TrainConfig, TrainMode

__all__ = [
    "EvalReport", "SweepResult", "top1", "severity_sweep",
    "label_fraction_sweep", "ablation_suite", "ABLATION_ARMS",
    "export_attention", "write_pgm",
]


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    distortion: DistortionSpec
    n_realizations: int
    mean_top1: float
    std_top1: Optional[float]
    accuracies: Tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "distortion": self.distortion.to_json(),
            "n_realizations": self.n_realizations,
            "mean_top1": self.mean_top1,
            "std_top1": self.std_top1,
            "accuracies": list(self.accuracies),
        }


@dataclass(frozen=True)
class SweepResult:
    axis: str  # "severity" | "label_fraction"
    points: Dict[str, List[Tuple[float, EvalReport]]]  # model name -> curve

    def __post_init__(self):
        for name, curve in self.points.items():
            values = [v for v, _ in curve]
            if any(b <= a for a, b in zip(values, values[1:])):
                raise InputError(f"sweep axis values for {name!r} must be strictly increasing")

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "points": {
                name: [{"value": v, "report": r.to_json()} for v, r in curve]
                for name, curve in self.points.items()
            },
        }


def _predict(params: ParamSet, config: ViTConfig, images: np.ndarray,
             batch_size: int = 256) -> np.ndarray:
    preds = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits = encoder.classify(params, config, images[i:i + batch_size])
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds)


def top1(params: ParamSet, config: ViTConfig, dataset: Sequence[LabeledImage],
         spec: DistortionSpec, realizations: int = 10, dataset_id: str = "test"
         ) -> EvalReport:
    """Top-1 accuracy (%) under ``realizations`` independent corruption
    draws (seed mixed with the realization index). Blur is deterministic,
    so blur reports collapse to a single realization with no std."""
    if len(dataset) == 0:
        raise InputError("empty evaluation dataset")
    if realizations < 1:
        raise ParameterError("realizations must be >= 1")
    if spec.kind is DistortionKind.BLUR:
        realizations = 1
    labels = np.asarray([s.label for s in dataset])
    accs = []
    for r in range(realizations):
        rspec = spec.reseeded(r)
        distorted = np.stack([
            distortions.apply(rspec, s.image, index=i) for i, s in enumerate(dataset)
        ]).astype(np.float32)
        preds = _predict(params, config, distorted)
        accs.append(100.0 * float(np.mean(preds == labels)))
    std = float(np.std(accs, ddof=1)) if len(accs) >= 2 else None
    return EvalReport(
        dataset=dataset_id, distortion=spec, n_realizations=len(accs),
        mean_top1=float(np.mean(accs)), std_top1=std, accuracies=tuple(accs),
    )


def spec_with_severity(spec: DistortionSpec, severity: float) -> DistortionSpec:
    """Spec of the same kind and seed, at a different severity value. For
    blur the value is sigma; the kernel size is the nearest odd >= 4*sigma+1."""
    if spec.kind is DistortionKind.MASK:
        return replace(spec, mask_ratio=float(severity))
    if spec.kind is DistortionKind.NOISE:
        return replace(spec, noise_sigma=float(severity))
    k = int(round(4 * severity + 1))
    if k % 2 == 0:
        k += 1
    return replace(spec, blur_sigma=float(severity), kernel_size=max(k, 1))


def severity_sweep(params: ParamSet, config: ViTConfig,
                   dataset: Sequence[LabeledImage], spec: DistortionSpec,
                   severities: Sequence[float], realizations: int = 10,
                   model_name: str = "model") -> SweepResult:
    """Top-1 at each severity of ``spec``'s kind; model left unchanged."""
    values = list(severities)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ParameterError("severities must be strictly increasing")
    curve = [
        (float(v), top1(params, config, dataset, spec_with_severity(spec, v), realizations))
        for v in values
    ]
    return SweepResult(axis="severity", points={model_name: curve})


def label_fraction_sweep(student: ParamSet, baseline: ParamSet, vit: ViTConfig,
                         fractions: Sequence[float], config: TrainConfig,
                         train: Sequence[LabeledImage], test: Sequence[LabeledImage],
                         num_classes: int, realizations: int = 10) -> SweepResult:
    """Fine-tune the distilled student and the baseline on nested
    stratified label subsets, then score each under the training
    distortion with shared evaluation seeds (paired comparison)."""
    values = sorted(set(float(f) for f in fractions))
    if any(not (0.0 < f <= 1.0) for f in values):
        raise ParameterError("fractions must be in (0, 1]")
    curves: Dict[str, List[Tuple[float, EvalReport]]] = {"distilled": [], "baseline": []}
    for frac in values:
        for name, params in (("distilled", student), ("baseline", baseline)):
            model, cfg, _ = trainer.finetune_run(
                params, vit, config, train, num_classes, label_fraction=frac
            )
            curves[name].append(
                (frac, top1(model, cfg, test, config.distortion, realizations))
            )
    return SweepResult(axis="label_fraction", points=curves)


ABLATION_ARMS: Dict[str, DistillWeights] = {
    "global": DistillWeights(lambda_cls=1.0, lambda_patch=0.0, lambda_attn=0.0),
    "global+local": DistillWeights(lambda_cls=1.0, lambda_patch=1.0, lambda_attn=0.0),
    "global+attn": DistillWeights(lambda_cls=1.0, lambda_patch=0.0, lambda_attn=50.0),
    "full": DistillWeights(lambda_cls=1.0, lambda_patch=1.0, lambda_attn=50.0),
}


def ablation_suite(teacher: ParamSet, student_init: ParamSet, vit: ViTConfig,
                   distill_cfg: TrainConfig, finetune_cfg: TrainConfig,
                   train: Sequence[LabeledImage], test: Sequence[LabeledImage],
                   num_classes: int, arms: Sequence[str] = tuple(ABLATION_ARMS),
                   label_fraction: float = 1.0, realizations: int = 10
                   ) -> Dict[str, EvalReport]:
    """Run distill -> finetune -> top1 for each loss-term arm under shared
    seeds, data order, and initialization (paired comparison)."""
    unknown = set(arms) - set(ABLATION_ARMS)
    if unknown:
        raise ConfigError(f"unknown ablation arms: {sorted(unknown)}")
    results: Dict[str, EvalReport] = {}
    for arm in arms:
        cfg = replace(distill_cfg, weights=ABLATION_ARMS[arm], mode=TrainMode.DISTILL)
        student, _ = trainer.distill_run(teacher, student_init, vit, cfg, train)
        model, mcfg, _ = trainer.finetune_run(
            student, vit, finetune_cfg, train, num_classes, label_fraction=label_fraction
        )
        results[arm] = top1(model, mcfg, test, finetune_cfg.distortion, realizations)
    return results


def render_table(results: Dict[str, EvalReport]) -> str:
    """Aligned plain-text table of arm/model name vs mean +/- std top-1."""
    name_w = max(len("model"), *(len(k) for k in results)) if results else 5
    lines = [f"{'model':<{name_w}}  {'top-1 (%)':>14}  realizations"]
    for name, rep in results.items():
        std = f" ± {rep.std_top1:5.2f}" if rep.std_top1 is not None else "        "
        lines.append(f"{name:<{name_w}}  {rep.mean_top1:6.2f}{std}  {rep.n_realizations}")
    return "\n".join(lines)


# --- attention export ---------------------------------------------------------

def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255. ``gray`` is (H, W) uint8."""
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.astype(np.uint8).tobytes())


def _to_gray(img: np.ndarray) -> np.ndarray:
    g = img.mean(axis=-1)
    return np.round(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_attention(params: ParamSet, config: ViTConfig, img: np.ndarray,
                     spec: DistortionSpec, out_dir) -> Dict[str, Path]:
    """Write clean input, distorted input, and head-averaged class-token
    attention (softmax at temperature 1, nearest-neighbor upsampled to the
    image size, normalized to [0, 255]) as binary PGM files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    distorted = distortions.apply(spec, img)
    with torch.no_grad():
        _, attn_logits = encoder.forward(params, config, distorted)
    attn = torch.softmax(attn_logits[0], dim=-1).mean(dim=0).numpy()  # (P,)
    grid = config.image_size // config.patch_size
    amap = attn.reshape(grid, grid)
    scale = config.patch_size
    amap = np.repeat(np.repeat(amap, scale, axis=0), scale, axis=1)
    lo, hi = amap.min(), amap.max()
    norm = (amap - lo) / (hi - lo) if hi > lo else np.full_like(amap, 0.5)
    paths = {
        "clean": out / "clean.pgm",
        "distorted": out / "distorted.pgm",
        "attention": out / "attention.pgm",
    }
    write_pgm(paths["clean"], _to_gray(img))
    write_pgm(paths["distorted"], _to_gray(distorted))
    write_pgm(paths["attention"], np.round(norm * 255.0).astype(np.uint8))
    return paths
