"""Desk-scale calibration of the directional experiments.

Trains the clean teacher, distills a student under 90% masking, fine-tunes
distilled vs baseline on 10% labels, and reports the accuracy gap.
"""

import sys
import time
from dataclasses import replace

import numpy as np

from dstl import data as D
from dstl import encoder as E
from dstl import evaluation as V
from dstl import trainer as T
from dstl.distortions import DistortionSpec
from dstl.trainer import TrainConfig, TrainMode


def log(*a):
    print(f"[{time.strftime('%H:%M:%S')}]", *a, flush=True)


def main(n_train=10000, n_test=2000, teacher_epochs=6, distill_epochs=6,
         ft_epochs=20, seeds=(0, 1, 2)):
    vit = E.ViTConfig()  # 32px patch4 dim64 depth4 heads4
    train = D.synth_shapes(n_train, 10, 32, seed=100)
    test = D.synth_shapes(n_test, 10, 32, seed=200)
    identity = DistortionSpec(kind="mask", mask_ratio=0.0, seed=0)
    mask = DistortionSpec(kind="mask", mask_ratio=0.9, seed=0)

    sup_cfg = TrainConfig(epochs=teacher_epochs, batch_size=64, peak_lr=1e-3,
                          distortion=identity, mode=TrainMode.SUPERVISED, seed=0)
    t0 = time.time()
    teacher_model, teacher_cfg, _ = T.finetune_run(
        E.init_params(vit, 0), vit, sup_cfg, train, num_classes=10)
    log(f"teacher trained in {time.time()-t0:.0f}s")
    clean_rep = V.top1(teacher_model, teacher_cfg, test, identity, realizations=1)
    log("teacher clean acc:", clean_rep.mean_top1)

    teacher = {k: v for k, v in teacher_model.items() if not k.startswith("head.")}

    gaps = []
    for seed in seeds:
        dcfg = TrainConfig(epochs=distill_epochs, batch_size=64, peak_lr=1e-3,
                           distortion=replace(mask, seed=seed), mode=TrainMode.DISTILL,
                           seed=seed)
        t0 = time.time()
        student, _ = T.distill_run(teacher, E.clone_params(teacher), vit, dcfg, train)
        log(f"seed {seed}: distilled in {time.time()-t0:.0f}s")
        fcfg = TrainConfig(epochs=ft_epochs, batch_size=64, peak_lr=1e-4,
                           distortion=replace(mask, seed=seed), mode=TrainMode.FINETUNE,
                           seed=seed)
        t0 = time.time()
        dist_model, dist_cfg, _ = T.finetune_run(student, vit, fcfg, train, 10,
                                                 label_fraction=0.1)
        base_model, base_cfg, _ = T.finetune_run(E.clone_params(teacher), vit, fcfg,
                                                 train, 10, label_fraction=0.1)
        log(f"seed {seed}: finetunes in {time.time()-t0:.0f}s")
        dist_rep = V.top1(dist_model, dist_cfg, test, replace(mask, seed=seed), realizations=3)
        base_rep = V.top1(base_model, base_cfg, test, replace(mask, seed=seed), realizations=3)
        gap = dist_rep.mean_top1 - base_rep.mean_top1
        gaps.append(gap)
        log(f"seed {seed}: distilled {dist_rep.mean_top1:.2f} baseline {base_rep.mean_top1:.2f} gap {gap:.2f}")
    log("mean gap:", np.mean(gaps))


if __name__ == "__main__":
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = eval(v)
    main(**kw)
