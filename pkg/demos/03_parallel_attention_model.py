"""A forward pass through the dual-branch network with attention traced."""
# %%
import numpy as np

from phasefuse.model import FusionModel, ModelConfig

arch = ModelConfig(image_size=224)
model = FusionModel.init(arch, seed=0)
print(f"{model.n_params():,} parameters, stage sizes {arch.stage_sizes()}")

# %%
rng = np.random.default_rng(0)
cxr, mf = rng.normal(size=(1, 224, 224, 3)), rng.normal(size=(1, 224, 224, 3))
trace = {}
logits = model(cxr, mf, trace=trace)
print("logits", logits.data.round(4))

# %% attention matrices: PA blocks work on 7x7 grids, the head on 49 tokens + CLS
for m in trace["attention"]:
    print(m.shape, "max |row sum - 1| =", f"{np.abs(m.sum(-1) - 1).max():.1e}")

# %% the three heads take the same final maps
for head in ("cross_vit", "mid_conv", "late_sum"):
    m = FusionModel.init(ModelConfig(image_size=64, head=head), 0)
    print(head, m(cxr[:, :64, :64], mf[:, :64, :64]).shape)
