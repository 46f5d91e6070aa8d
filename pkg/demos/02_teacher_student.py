# %% [markdown]
# # A short teacher-student run
#
# Trains the full semi-supervised mode for a few hundred iterations and
# watches the labeled pool grow when the teacher and student agree.
# About a minute on one core.

# %%
from dataclasses import replace

import numpy as np

from rest3d import MODES, TrainConfig, generate_dataset, run
from rest3d.metrics import compare_runs, format_table

ds = generate_dataset()
base = TrainConfig(total_iters=600, burn_in_iters=200, labeled_ratio=0.05, eval_every=0)

# %% [markdown]
# The callback sees every phase change. We record pool sizes and the
# per-sample pseudo-label weights.

# %%
trace = {"labeled": [], "weights": [], "events": []}


def watch(event, state, info):
    trace["labeled"].append(len(state.labeled))
    if event == "mutual":
        trace["weights"] += list(info["lambda"])
    elif event in ("init_student", "tscs"):
        trace["events"].append((event, state.iter))


res = run(replace(base, **MODES["ssl_full"]), ds, callback=watch)
print(trace["events"])
print("labeled pool:", trace["labeled"][0], "->", trace["labeled"][-1])
print("promotions:", len(res.state.promotion_log))

# %%
w = np.array(trace["weights"])
print("pseudo-label weight: mean %.3f, zero for %.1f%% of samples" % (w.mean(), 100 * np.mean(w == 0)))

# %% [markdown]
# ## Against the supervised baseline

# %%
sup = run(replace(base, **MODES["supervised"]), ds)
print(format_table(compare_runs({"supervised": sup.report, "ssl_full": res.report}, baseline="supervised")))
