"""The pretraining mechanisms at desk scale, end to end.

A linear patch encoder stands in for the big backbone; everything the memory
machinery adds sits downstream and runs here in float64 on a hand-rolled
autodiff tape:

  * a FIFO bank of spatially averaged features (keys) and MLP values,
    filled from the EMA target network;
  * contextualization: each patch feature attends over that bank and is
    mixed with the retrieved value (weight lambda);
  * attention pooling of the grid into one image vector;
  * projection/prediction heads rescaled to norm 1/sqrt(tau), a contrastive
    loss between two views, and a retrieval-based classification loss.
"""

import numpy as np

from patchbank import pretrain as pt

cfg = pt.LossConfig(lam=0.2, tau=0.1, alpha=0.05, ema_decay=0.99,
                    pooling_mode="qkv", lr=0.003, batchnorm=False, seed=1)
print("config:", cfg)

# Two augmented "views" per image: same class prototype, independent noise.
state, rows = pt.run_toy_training(cfg, steps=200, num_images=16, batch=16)
print(f"\nloss trajectory: {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f} "
      f"over {len(rows)} steps")
smoothed = np.convolve([r["total"] for r in rows], np.ones(20) / 20, "valid")
print(f"window-20 smoothed loss monotone decreasing: "
      f"{bool(np.all(np.diff(smoothed) < 0))}")

# The attention-pooling ablation: mean / learned logits / logits + value map.
print("\npooling-mode comparison (same seed, 60 steps):")
for mode in pt.POOLING_MODES:
    mcfg = pt.LossConfig(**{**cfg.__dict__, "pooling_mode": mode})
    _, mrows = pt.run_toy_training(mcfg, steps=60, num_images=16, batch=16)
    print(f"  {mode:>4}: final total {mrows[-1]['total']:.4f} "
          f"(ssl {mrows[-1]['ssl']:.4f}, sup {mrows[-1]['sup']:.4f})")

# Turning the memory path off (lambda = 0) changes the trajectory: the
# contextual branch is live, not decorative.
off = pt.LossConfig(**{**cfg.__dict__, "lam": 0.0})
_, rows_off = pt.run_toy_training(off, steps=30, num_images=16, batch=16)
print(f"\nlambda 0.2 vs 0.0 loss at step 30: "
      f"{rows[29]['total']:.4f} vs {rows_off[29]['total']:.4f}")

# Every gradient in that run is backed by the tape; spot-check one parameter
# against central finite differences.
v1, v2, labels = pt.make_toy_views(6, 4, 16, 4, 0.25, seed=2)
check_state = pt.init_state(16, 16, 32, 16, 4, cfg)
pt.bank_push(check_state.ssl_bank, pt.view_encoded(v1, check_state.xi),
             check_state.xi, False)
pt.bank_push(check_state.sup_bank, pt.view_encoded(v1, check_state.xi),
             check_state.xi, False, labels=labels)
tparams = pt.as_tensors(check_state.params, requires_grad=True)
loss, _ = pt.total_loss(tparams, check_state, v1, v2, labels, cfg)
loss.backward()

name = "psi_w"
eps = 1e-4
w = check_state.params[name]
i, j = 0, 1
orig = w[i, j]
w[i, j] = orig + eps
up = pt.total_loss(check_state.params, check_state, v1, v2, labels, cfg)[0].data
w[i, j] = orig - eps
down = pt.total_loss(check_state.params, check_state, v1, v2, labels, cfg)[0].data
w[i, j] = orig
fd = (up - down) / (2 * eps)
print(f"\nd loss / d {name}[0,1]: tape {tparams[name].grad[i, j]:+.8f}  "
      f"finite-diff {fd:+.8f}")
