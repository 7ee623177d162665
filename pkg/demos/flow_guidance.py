"""Train a small conditional flow on two 2-D Gaussians and sample it at several guidance weights."""

import numpy as np

from blockflow import flow
from blockflow.conditioning import ConditionSchema, ConditionTable

schema = ConditionSchema(("side",), (("left", "right"),))
rng = np.random.default_rng(0)
n = 2000
side = rng.integers(1, 3, size=n)
points = np.stack([np.where(side == 1, -2.0, 2.0), np.zeros(n)], 1) + 0.25 * rng.standard_normal((n, 2))

cfg = flow.FlowConfig(n_tokens=1, d=2, e=16, n_blocks=2, ode_steps=50)
model, _, trace = flow.train_flow(points.reshape(n, 1, 2), ConditionTable(side.reshape(-1, 1), schema), cfg, 100,
                                  rng, lr=3e-3, warmup_epochs=5)
print(f"flow loss {trace[0]['loss']:.3f} -> {trace[-1]['loss']:.3f}")

right = ConditionTable(np.full((1000, 1), 2), schema)
for w in (0.0, 1.0, 2.0, 4.0):
    s = flow.sample_ode(1000, right, model, cfg, np.random.default_rng(1), w=w).reshape(-1, 2)
    print(f"w={w}: mean x {s[:, 0].mean():+.2f}, share on the right {np.mean(s[:, 0] > 0):.0%}")
