"""Checking the hand-written backward passes against finite differences.

Every differentiable operation records a backward closure on a tape; the
checker perturbs inputs one coordinate at a time and compares the result
with the analytic gradient.

    python3 demos/02_gradient_check.py
"""

import numpy as np

from sleepvit import numerics as nx
from sleepvit.model import ModelConfig, forward_tensors, init_params
from sleepvit.training import TrainConfig, joint_loss

rng = np.random.default_rng(0)

# a single primitive: multi-head attention on a short sequence
inputs = [rng.standard_normal((2, 5, 4)), rng.standard_normal((4, 12)), rng.standard_normal(12),
          rng.standard_normal((4, 4)), rng.standard_normal(4)]
rep = nx.grad_check(lambda *a: nx.multi_head_attention(*a, 2)[0], inputs)
print(f"attention: {rep.n_checked} coordinates, max relative error {rep.max_rel_error:.2e}")

# the whole model and joint loss, in float64 with a tiny configuration
cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, mlp_hidden=16, head_hidden=16,
                  branch_hidden=8)
params = init_params(cfg, seed=0, dtype=np.float64)
# the default init (std 0.02) leaves activations sitting on ReLU kinks and gradients
# near round-off; O(1) weights make finite differences meaningful
for name, t in params.tensors.items():
    fan_in = np.prod(t.shape[1:]) if name == "patch.kernel" else t.shape[0]
    t[...] = rng.standard_normal(t.shape) / np.sqrt(fan_in if t.ndim >= 2 else 10.0)
names = list(params.tensors)
x = rng.standard_normal((2, 4, 1920))


def loss(*tensors):
    ps, pa, _ = forward_tensors(dict(zip(names, tensors)), cfg, x, capture=False)
    return joint_loss(ps, pa, [0, 4], [1, 0], TrainConfig(), {})


rep = nx.grad_check(loss, list(params.tensors.values()), step=1e-4, max_checks=5,
                    rng=np.random.default_rng(1))
print(f"model: {len(names)} parameter tensors, {rep.n_checked} coordinates, "
      f"max relative error {rep.max_rel_error:.2e}, passed={rep.passed}")
