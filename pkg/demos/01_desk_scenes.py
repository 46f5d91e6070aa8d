# %% [markdown]
# # Desk scenes and referring expressions
#
# A walk through the synthetic data: one scene, its superpoints, a few
# expressions, and how the loss and IoU behave on hand-made masks.

# %%
import numpy as np

from rest3d import SceneConfig, SplitSpec, generate_dataset, generate_scene, make_splits
from rest3d.losses import bce_loss, dice_loss, mask_iou
from rest3d.scenes import build_vocab, generate_expression, instance_stats

# %%
scene = generate_scene(seed=3, config=SceneConfig())
print("points", scene.n_points, "superpoints", scene.n_superpoints, "instances", scene.n_instances)
print("categories per instance", scene.instance_categories())

# %% [markdown]
# Per-instance statistics drive the attribute words ("large", "dark", ...).

# %%
stats = instance_stats(scene)
for k in ("centroid", "volume", "brightness"):
    print(k, np.round(np.asarray(stats[k])[:3], 3))

# %%
vocab = build_vocab()
for referent in range(min(3, scene.n_instances)):
    toks = generate_expression(scene, referent, seed=referent)
    print(referent, " ".join(vocab[t] for t in toks))

# %% [markdown]
# ## The dataset and a 2% labeled split

# %%
ds = generate_dataset()
d_l, d_u = make_splits(ds.samples, SplitSpec(0.02, seed=0))
print(len(ds.samples), "train samples:", len(d_l), "labeled,", len(d_u), "unlabeled")
print("unique rate", np.mean([s.is_unique for s in ds.samples]).round(3))
assert all(s.gt_mask is None for s in d_u)

# %% [markdown]
# ## Losses on toy masks

# %%
gt = np.array([1, 1, 0, 0], bool)
print("bce at p=0.5:", bce_loss(np.full(4, 0.5), gt), "(ln 2 =", np.log(2), ")")
print("dice, one of two hit:", dice_loss([1, 1, 0, 0], [1, 0, 0, 0]))
print("iou:", mask_iou(gt, np.array([0, 1, 1, 0], bool)))
