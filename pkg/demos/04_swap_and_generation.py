"""
Swapping codes and generating new dynamics
==========================================

With a trained model, the static code of one sequence can be combined with
the dynamic codes of another. Re-encoding the result tells us whether each
code kept its role. Generation keeps a sequence's static code, draws fresh
dynamic codes, and scores the result through the world's exact inverse.
"""

import numpy as np

from sdflow.evalkit import generation_fidelity, swap_experiment
from sdflow.trainer import TrainConfig, train
from sdflow.worlds import WorldSpec, generate_dataset, make_world

spec = WorldSpec(N=2000, seed=2)
data = generate_dataset(spec)
ckpt, _ = train(TrainConfig(steps=1500, eval_every=1500), data)

# %%
# Static code from B, dynamic codes from A.

rng = np.random.default_rng(0)
idx = rng.permutation(data.N)
res = swap_experiment(ckpt, data.x[idx[:100]], data.x[idx[100:200]])
print("static consistency", round(res["static_consistency"], 4), "CI", np.round(res["static_ci"], 4))
print("dynamic consistency", round(res["dynamic_consistency"], 4))

# %%
# The swapped sequence carries B's static factors, checked in factor space.

s_hat, _ = make_world(spec).unmix(res["x_hat"])
print("corr(recovered s, donor s):",
      [round(float(np.corrcoef(s_hat[:, :, j].mean(1), data.s[idx[100:200], j])[0, 1]), 3) for j in range(2)])

# %%
# Fresh dynamics for a fixed static code. Preservation is 0 when the
# recovered static factors match exactly; the random baseline uses shuffled
# static factors.

gen = generation_fidelity(ckpt, data, make_world(spec), m_g=8, n_seq=100)
print(gen)
