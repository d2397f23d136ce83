"""Learning-rate scan for desk-scale convergence."""
import sys
import time

import numpy as np

from centermix.synth import build_default_policies, generate_dataset, sample_fewshot
from centermix.workflows import TrainConfig, attach_organ_inputs, evaluate, train_multicenter

lr = float(sys.argv[1])
epochs = int(sys.argv[2])
variant = sys.argv[3] if len(sys.argv) > 3 else "mome"

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

cfg = TrainConfig(variant=variant, epochs_train=epochs, batch_size=2, top_k=2,
                  n_experts=8, seed=42, channels=(4, 8, 16, 32),
                  context_dim=32, prompt_tokens=8, grid=GRID,
                  fewshot_oversample=15, weight_decay=0.0, lr_train=lr)
t0 = time.time()
model, log = train_multicenter(cfg, {"A": a_train, "B": b_shot, "C": c_shot},
                               [(b_val, "B"), (c_val, "C")])
_, summ = evaluate(model, c_test, "C", seed=1)
_, summ_a = evaluate(model, a_train[:15], "A", seed=1)
print(f"lr={lr} epochs={epochs} {variant}: dice(C)={summ['dice'].mean:.3f} "
      f"dice(A-train)={summ_a['dice'].mean:.3f} best_ep={log.best_epoch}")
print("val curve:", " ".join(f"{e.val_dice:.2f}" for e in log.epochs))
print("loss curve:", " ".join(f"{e.train_loss:.2f}" for e in log.epochs))
print(f"{time.time()-t0:.0f}s")
