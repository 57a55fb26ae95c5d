"""Walk through the pipeline on a small synthetic dataset.

Runs in well under a minute on one CPU:

    python3 demos/walkthrough.py [workdir]
"""
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from papnet.augment import (
    AugmentConfig,
    build_eval_set,
    build_training_set,
    plan_augmentation,
)
from papnet.data import (
    SyntheticSpec,
    dataset_stats,
    decode_all,
    generate_synthetic,
    load_manifest,
)
from papnet.evaluate import TTAConfig, evaluate_cells
from papnet.nn import InitPolicy, build_network, init_weights, preset_spec
from papnet.split import audit_leakage, fold_split, make_folds
from papnet.train import TrainConfig, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="papnet-"))

# a dataset: 200 cells, two per patient, labelled by nucleus/cytoplasm area ratio
generate_synthetic(work / "data", SyntheticSpec(n_cells=200, image_size=40, cells_per_patient=2, seed=1))
manifest = load_manifest(work / "data" / "manifest.csv")
print(dataset_stats(manifest).table())

records = decode_all(manifest)
r = records[0]
print(f"\ncell 0: {r.shape} px, class {r.class_label}, nucleus {int(r.nucleus_mask.sum())} px, "
      f"cytoplasm {int(r.cytoplasm_mask.sum())} px")

# patient-level folds; no patient is split across train and validation
plan = make_folds(manifest, k=5, seed=0)
train_idx, val_idx = fold_split(plan, 0, manifest)
print(f"\nfold 0: {len(train_idx)} training cells, {len(val_idx)} validation cells")

# balance the training side by rotation and jitter
cfg = AugmentConfig(m=24, d=2, target_per_class=400, out_size=32)
train_cells = [records[i] for i in train_idx]
val_cells = [records[i] for i in val_idx]
aug = plan_augmentation(Counter(c.class_label for c in train_cells), cfg)
for label in aug.classes:
    cp = aug[label]
    print(f"class {label}: {cp.count} cells x {cp.n_rot} rotations x {cp.n_trans} shifts "
          f"(+{cp.n_extra}) = {cp.expected}")

train_set = build_training_set(train_cells, aug, cfg)
val_set = build_eval_set(val_cells, cfg)
print(audit_leakage(plan, train_set, val_set))

# one sample is a 5-channel tensor: RGB, nucleus mask, cytoplasm mask
x = train_set.tensors([0])[0]
print(f"sample tensor {x.shape}, channel means {np.round(x.mean(axis=(0, 1)), 3)}")

# train the same network on 5 channels and on RGB only
for channels in (5, 3):
    net = build_network(preset_spec("cellnet-s", 28, channels, 2))
    init_weights(net, InitPolicy(gaussian_std="he"), np.random.default_rng(0))
    tcfg = TrainConfig(epochs=6, batch_size=32, base_lr=0.01, lr_decay_every=4, crop=28, seed=0)
    res = train(net, train_set, val_set, tcfg, channels=channels)
    net.set_parameters(res.best_params)
    ev = evaluate_cells(net, val_cells, "2class", TTAConfig(n_random_views=3, n_crops=10), cfg, 28,
                        res.channel_means, fold=0)
    m = ev.metrics
    print(f"{channels}C: train acc {res.history[-1]['train_acc']:.3f}, "
          f"validation acc {m['acc']:.3f}, sens {m['sens']:.3f}, spec {m['spec']:.3f}, AUC {m['auc']:.3f}")

print(f"\nfiles under {work}")
