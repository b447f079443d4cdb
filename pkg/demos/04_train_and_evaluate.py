"""Train on the synthetic three-class task and print a metrics table.

A short run (a few minutes on one core).  Pass ``--full`` for the 15-epoch
five-fold comparison of the fusion model against the CXR-only baseline.
"""
# %%
import sys
import tempfile

import numpy as np

from phasefuse.data import load_manifest, synth_dataset
from phasefuse.metrics import evaluate, report_rows
from phasefuse.model import ModelConfig
from phasefuse.training import TrainConfig, cross_validate, predict_scores, prepare_dataset, stratified_kfold, train

full = "--full" in sys.argv
root = tempfile.mkdtemp()
manifest = load_manifest(synth_dataset(root, 100, 64, seed=42))
data = prepare_dataset(manifest, 64)
print(f"{len(data)} images, classes {np.bincount(data.labels).tolist()}")

# %% one fold
cfg = TrainConfig(epochs=15 if full else 6, warmup_epochs=4 if full else 2)
arch = ModelConfig(image_size=64)
res = train(cfg, data, arch, fold=0, callback=lambda r: print(
    f"epoch {r['epoch']:2d} lr {r['lr']:.5f} loss {r['train_loss']:.4f} val acc {r['val_acc']:.3f}"))

# %% table for the held-out fold
val = np.flatnonzero(stratified_kfold(data.labels, cfg.folds, cfg.seed) == 0)
rep = evaluate(predict_scores(res.model, data, val), data.labels[val])
for row in report_rows(rep):
    print("  ".join(f"{v:>11.4f}" if isinstance(v, float) else f"{v:>11s}" for v in row))

# %% fusion against the single-branch baseline
if full:
    for name, a in (("fusion", arch), ("cxr only", ModelConfig(image_size=64, branches=1, fusion_scales=()))):
        accs = [r.history[-1]["val_acc"] for r in cross_validate(cfg, data, a)]
        print(f"{name:9s} mean fold accuracy {np.mean(accs):.3f} {np.round(accs, 3).tolist()}")
