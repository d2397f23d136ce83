"""Pilot for the center-shift experiment: reduced scale, prints orderings."""
import time

import numpy as np

from centermix.metrics import gpr
from centermix.synth import build_default_policies, generate_dataset, sample_fewshot
from centermix.workflows import (
    TrainConfig, attach_organ_inputs, evaluate, predict_mask, train_multicenter,
)

t0 = time.time()
policies = build_default_policies()
GRID = (32, 32, 16)

a_train = generate_dataset(policies["A"], 60, seed=101, grid=GRID)
b_pool = generate_dataset(policies["B"], 25, seed=102, grid=GRID)
c_pool = generate_dataset(policies["C"], 25, seed=103, grid=GRID)
c_test = generate_dataset(policies["C"], 30, seed=104, grid=GRID)

rng = np.random.default_rng(7)
b_shot, b_val = sample_fewshot(b_pool, 1, rng)
c_shot, c_val = sample_fewshot(c_pool, 1, rng)

for cases in (a_train, b_shot, [b_val], c_shot, [c_val], c_test):
    attach_organ_inputs(cases, None, oracle=True)

pools = {"A": a_train, "B": b_shot, "C": c_shot}
val = [(b_val, "B"), (c_val, "C")]

print(f"setup {time.time()-t0:.0f}s; A risk mix:",
      {g: sum(1 for c in a_train if __import__('centermix.clinical', fromlist=['risk_group']).risk_group(c['record']) == g)
       for g in ('low', 'intermediate', 'high', 'very_high')})

results = {}
models = {}
for variant in ("mome", "vanilla-moe", "vision-only"):
    cfg = TrainConfig(variant=variant, epochs_train=4, batch_size=2, top_k=2,
                      n_experts=8, seed=42, channels=(4, 8, 16, 32),
                      context_dim=32, prompt_tokens=8, grid=GRID,
                      fewshot_oversample=10, weight_decay=0.0)
    t1 = time.time()
    model, log = train_multicenter(cfg, pools, val, variant=variant)
    rows, summ = evaluate(model, c_test, "C", seed=1)
    results[variant] = summ["dice"].mean
    models[variant] = model
    print(f"{variant}: dice(C)={summ['dice'].mean:.3f} "
          f"val_curve={[f'{e.val_dice:.2f}' for e in log.epochs]} "
          f"loss={[f'{e.train_loss:.3f}' for e in log.epochs]} "
          f"({time.time()-t1:.0f}s)")

mome = models["mome"]
gpr_c, gpr_a = [], []
for case in c_test:
    pred_c = predict_mask(mome, case, "C")
    pred_a = predict_mask(mome, case, "A")
    g_c = gpr(case["gtv"], pred_c)
    g_a = gpr(case["gtv"], pred_a)
    if g_c is not None and g_a is not None:
        gpr_c.append(g_c)
        gpr_a.append(g_a)

print(f"\nrouter swap: median GPR with C router {np.median(gpr_c):.1f} "
      f"vs A router {np.median(gpr_a):.1f} (need C - A >= 5)")
print(f"dice: mome {results['mome']:.3f} vanilla {results['vanilla-moe']:.3f} "
      f"vision {results['vision-only']:.3f}")
print(f"margins: mome-vanilla {results['mome']-results['vanilla-moe']:+.3f} (need >= 0.02), "
      f"mome-vision {results['mome']-results['vision-only']:+.3f} (need >= 0.04)")
print(f"total {time.time()-t0:.0f}s")
