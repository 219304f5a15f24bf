# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Fully actuated double pendulum
#
# With one torque per joint the joint angles are a flat output, nothing is
# promoted, and the only chain length is two per joint. The synthesized law
# then reduces to computed torque.

# %%
import numpy as np

from flatlin.feedback import feedback, random_consistent_point, synthesize
from flatlin.flatness import enumerate_kappa
from flatlin.project import Project

pr = Project("builtin:toy")
cands = enumerate_kappa(pr.gen_map, pr.y_s)
print([(tuple(c.kappa), c.case) for c in cands])

# %%
law = synthesize(pr.gen_map, cands[0], pr.y_s)
rng = np.random.default_rng(0)
q, v, w, _ = random_consistent_point(law, rng, scale=0.3)
M, G, c = pr.csf.matrices(q, v)
print(feedback(law, q, v, w))
print(np.linalg.solve(G, M @ w[:, 0] + c))
