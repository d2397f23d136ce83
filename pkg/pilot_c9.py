"""Pilot for few-shot fine-tuning monotonicity on a closed center."""
import copy
import time

import numpy as np

from centermix.segnet import SegModel
from centermix.synth import build_default_policies, generate_dataset, sample_fewshot
from centermix.workflows import (
    TrainConfig, attach_organ_inputs, evaluate, finetune_closed, route_select,
    train_multicenter,
)

t0 = time.time()
policies = build_default_policies()
GRID = (32, 32, 16)

a_train = generate_dataset(policies["A"], 60, seed=101, grid=GRID)
b_pool = generate_dataset(policies["B"], 25, seed=102, grid=GRID)
c_pool = generate_dataset(policies["C"], 25, seed=103, grid=GRID)
e_pool = generate_dataset(policies["E"], 30, seed=105, grid=GRID)
e_test = generate_dataset(policies["E"], 30, seed=106, grid=GRID)

rng = np.random.default_rng(7)
b_shot, b_val = sample_fewshot(b_pool, 1, rng)
c_shot, c_val = sample_fewshot(c_pool, 1, rng)
for cases in (a_train, b_shot, [b_val], c_shot, [c_val], e_pool, e_test):
    attach_organ_inputs(cases, None, oracle=True)

cfg = TrainConfig(variant="mome", epochs_train=4, batch_size=2, top_k=2,
                  n_experts=8, seed=42, channels=(4, 8, 16, 32),
                  context_dim=32, prompt_tokens=8, grid=GRID,
                  fewshot_oversample=10, weight_decay=0.0)
model, _ = train_multicenter(cfg, {"A": a_train, "B": b_shot, "C": c_shot},
                             [(b_val, "B"), (c_val, "C")])
print(f"pretrain done {time.time()-t0:.0f}s")

rng_e = np.random.default_rng(17)
shots1, val1 = sample_fewshot(e_pool, 1, rng_e)
shots3, val3 = sample_fewshot(e_pool, 3, rng_e)

best_flag, table = route_select(model, shots1)
print("route-select on E samples:", best_flag, {k: round(v, 3) for k, v in table.items()})

_, summ0 = evaluate(model, e_test, best_flag, seed=1)
dice0 = summ0["dice"].mean
print(f"0-shot dice (flag {best_flag}): {dice0:.3f}")

for shots, (train_c, val_c), ft_epochs, lr in [
    (1, (shots1, val1), 150, 1e-5),
    (3, (shots3, val3), 150, 1e-5),
]:
    m = copy.deepcopy(model)
    ft_cfg = TrainConfig(**{**cfg.__dict__, "epochs_finetune": ft_epochs,
                            "lr_finetune": lr,
                            "centers": cfg.centers, "channels": cfg.channels,
                            "grid": cfg.grid, "spacing": cfg.spacing,
                            "data_dirs": {}})
    t1 = time.time()
    log = finetune_closed(m, "E", train_c, val_c, ft_cfg, copy_from=best_flag)
    _, summ = evaluate(m, e_test, "E", seed=1)
    print(f"{shots}-shot (epochs {ft_epochs}, lr {lr}): dice {summ['dice'].mean:.3f} "
          f"best_ep {log.best_epoch} val {log.best_val_dice:.3f} ({time.time()-t1:.0f}s)")

print(f"total {time.time()-t0:.0f}s")
