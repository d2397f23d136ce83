"""Training, router selection, few-shot fine-tuning, evaluation, ablation.

All procedures are seeded and deterministic: every random choice flows
from the config seed through named SeedSequence spawns, batches are
single-center (only that center's router participates in a step), and
checkpoints round-trip bitwise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .caseio import read_dataset
from .clinical import risk_group
from .engine import AdamW, Graph, backward
from .exceptions import ConfigError, ContractError
from .metrics import CaseMetrics, case_metrics, write_report
from .segnet import ModelConfig, SegModel, preprocess_hu, segmentation_loss
from .stats import bootstrap_ci

METHOD_VARIANTS = ("mome", "vanilla-moe", "text-prompt", "vision-only")


@dataclass
class TrainConfig:
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lr_train: float = 1e-4
    lr_finetune: float = 1e-5
    epochs_train: int = 100
    epochs_finetune: int = 500
    batch_size: int = 2
    top_k: int = 2
    n_experts: int = 8
    seed: int = 0
    shots: int = 1
    fewshot_oversample: int = 1
    steps_per_epoch: Optional[int] = None
    weight_decay: float = 0.01
    freeze_organ: bool = True
    freeze_encoder_on_finetune: bool = True
    closed_router_init: str = "copy"          # copy | random
    variant: str = "mome"
    centers: tuple[str, ...] = ("A", "B", "C")
    channels: tuple[int, ...] = (8, 16, 32, 64)
    context_dim: int = 32
    prompt_tokens: int = 8
    grid: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    organ_oracle: bool = True
    noise_at_inference: bool = False
    aux_balance: float = 0.0
    data_dirs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_dice < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr_train <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_train < 1 or self.epochs_finetune < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.epochs_finetune > 500:
            raise ConfigError("epochs_finetune is capped at 500")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.shots not in (1, 2, 3):
            raise ConfigError("shots must be 1, 2, or 3")
        if self.variant not in METHOD_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.closed_router_init not in ("copy", "random"):
            raise ConfigError("closed_router_init must be 'copy' or 'random'")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        for key in ("centers", "channels", "grid", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            variant=variant or self.variant, in_channels=2, channels=self.channels,
            context_dim=self.context_dim, prompt_tokens=self.prompt_tokens,
            n_experts=self.n_experts, top_k=self.top_k, centers=self.centers,
            grid=self.grid, spacing=self.spacing,
            noise_at_inference=self.noise_at_inference, aux_balance=self.aux_balance)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float


@dataclass
class RunLog:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = float("-inf")
    rng_digest: str = ""
    checkpoint: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "rng_digest": self.rng_digest,
            "checkpoint": self.checkpoint,
        }, indent=1)


def _rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=int)
    return hashlib.sha1(state.encode()).hexdigest()[:16]


def _prepared_organ(case: dict) -> np.ndarray:
    organ = case.get("organ_input", case.get("organ"))
    if organ is None:
        raise ContractError(f"case {case.get('case_id')} has no organ mask")
    return np.asarray(organ, dtype=np.float32)


def attach_organ_inputs(cases: list[dict], organ_model: SegModel | None,
                        oracle: bool = True) -> None:
    """Populate case['organ_input'], either from the generator mask
    (oracle mode) or from the frozen extraction model."""
    for case in cases:
        if oracle:
            case["organ_input"] = np.asarray(case["organ"], dtype=np.float32)
        else:
            if organ_model is None:
                raise ContractError("organ extraction requires a model when oracle is off")
            image = preprocess_hu(np.asarray(case["image"]))
            logits = organ_model.forward(image, None, None, "A").data
            case["organ_input"] = (logits > 0.0).astype(np.float32)


def predict_logits(model: SegModel, case: dict, flag: str) -> np.ndarray:
    """Full-volume logits; sliding window when the case exceeds the
    training grid (half-window stride, overlaps averaged)."""
    image = preprocess_hu(np.asarray(case["image"]))
    organ = _prepared_organ(case)
    record = case.get("record") if model.cfg.multimodal else None
    window = tuple(model.cfg.grid)
    if image.shape == window:
        return model.forward(image, organ, record, flag).data

    dims = image.shape
    acc = np.zeros(dims, dtype=np.float64)
    cnt = np.zeros(dims, dtype=np.float64)

    def starts(dim, win, st):
        out = list(range(0, dim - win + 1, st))
        if out[-1] != dim - win:
            out.append(dim - win)
        return out

    stride = tuple(max(w // 2, 1) for w in window)
    for i in starts(dims[0], window[0], stride[0]):
        for j in starts(dims[1], window[1], stride[1]):
            for k in starts(dims[2], window[2], stride[2]):
                sl = (slice(i, i + window[0]), slice(j, j + window[1]),
                      slice(k, k + window[2]))
                acc[sl] += model.forward(image[sl], organ[sl], record, flag).data
                cnt[sl] += 1.0
    return (acc / cnt).astype(np.float32)


def predict_mask(model: SegModel, case: dict, flag: str) -> np.ndarray:
    return (predict_logits(model, case, flag) > 0.0).astype(np.uint8)


def mean_dice(model: SegModel, cases_with_flags) -> float:
    from .metrics import dice_iou
    scores = []
    for case, flag in cases_with_flags:
        pred = predict_mask(model, case, flag)
        scores.append(dice_iou(pred, case["ptv"])[0])
    return float(np.mean(scores))


def _train_batches(pools: dict[str, list[dict]], batch_size: int,
                   oversample: dict[str, int], rng: np.random.Generator,
                   steps_cap: Optional[int]):
    """Single-center batches covering the oversampled pool once, in a
    seeded random center order."""
    queues = {}
    for flag, cases in pools.items():
        repeat = oversample.get(flag, 1)
        idx = np.tile(np.arange(len(cases)), repeat)
        rng.shuffle(idx)
        queues[flag] = [cases[i] for i in idx]
    flags = sorted(queues)
    batches = []
    while any(queues[f] for f in flags):
        weights = np.array([len(queues[f]) for f in flags], dtype=np.float64)
        probs = weights / weights.sum()
        flag = flags[int(rng.choice(len(flags), p=probs))]
        batch = [queues[flag].pop() for _ in range(min(batch_size, len(queues[flag])))]
        batches.append((flag, batch))
        if steps_cap is not None and len(batches) >= steps_cap:
            break
    return batches


def train_step(model: SegModel, flag: str, batch: list[dict], cfg: TrainConfig,
               opt: AdamW, rng: np.random.Generator) -> float:
    """One optimizer step on a single-center batch (gradients averaged
    over the batch cases). Returns the mean loss."""
    opt.zero_grad()
    total = 0.0
    for case in batch:
        image = preprocess_hu(np.asarray(case["image"]))
        organ = _prepared_organ(case)
        record = case.get("record") if model.cfg.multimodal else None
        g = Graph()
        with g.recording():
            aux: list = []
            logits = model.forward(image, organ, record, flag, mode="train",
                                   rng=rng, aux=aux)
            loss = segmentation_loss(logits, case["ptv"].astype(np.float32),
                                     cfg.lambda_ce, cfg.lambda_dice)
            for extra in aux:
                from .engine import ops
                loss = ops.add(loss, extra)
        backward(g, loss)
        total += loss.item()
    opt.scale_grads(1.0 / len(batch))
    opt.step(skip_missing=True)
    return total / len(batch)


def _snapshot(model: SegModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params().items()}


def _restore(model: SegModel, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.params().items():
        p.data = snap[name].copy()


def _run_training(model: SegModel, pools, val_cases, cfg: TrainConfig, *,
                  epochs: int, lr: float, trainable: dict, oversample: dict,
                  rng: np.random.Generator, out_dir=None, tag: str = "train") -> RunLog:
    if not trainable:
        raise ConfigError("no trainable parameter groups")
    opt = AdamW(trainable, lr=lr, weight_decay=cfg.weight_decay)
    log = RunLog(config=json.loads(cfg.to_json()))
    best = (_snapshot(model), float("-inf"), -1)
    for epoch in range(1, epochs + 1):
        batches = _train_batches(pools, cfg.batch_size, oversample, rng,
                                 cfg.steps_per_epoch)
        losses = [train_step(model, flag, batch, cfg, opt, rng)
                  for flag, batch in batches]
        val = mean_dice(model, val_cases) if val_cases else float("nan")
        log.epochs.append(EpochLog(epoch=epoch, train_loss=float(np.mean(losses)),
                                   val_dice=val))
        # ties resolve toward the later (more-trained) checkpoint
        if val_cases and val >= best[1]:
            best = (_snapshot(model), val, epoch)
    if val_cases and best[2] >= 0:
        _restore(model, best[0])
        log.best_epoch = best[2]
        log.best_val_dice = best[1]
    else:
        log.best_epoch = epochs
        log.best_val_dice = log.epochs[-1].val_dice if log.epochs else float("nan")
    log.rng_digest = _rng_digest(rng)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / f"{tag}.ckpt"
        model.save(ckpt, extra_meta={"tag": tag})
        log.checkpoint = str(ckpt)
        (out_dir / f"{tag}_run_log.json").write_text(log.to_json())
    return log


def train_multicenter(cfg: TrainConfig, pools: dict[str, list[dict]],
                      val_cases: list[tuple[dict, str]], *,
                      variant: str | None = None, out_dir=None,
                      model: SegModel | None = None) -> tuple[SegModel, RunLog]:
    """Train on the full primary-center pool plus few-shot pools; every
    batch is single-center, activating only that center's router. The
    best checkpoint by mean validation Dice is kept."""
    seed_root = np.random.SeedSequence(cfg.seed)
    init_seq, train_seq = seed_root.spawn(2)
    if model is None:
        model = SegModel(cfg.model_config(variant), rng=np.random.default_rng(init_seq))
    missing = [f for f in pools if model.cfg.variant == "mome" and f not in model.registered_centers()]
    if missing:
        raise ConfigError(f"centers {missing} have no registered router")
    oversample = {flag: (1 if flag == "A" else cfg.fewshot_oversample) for flag in pools}
    log = _run_training(model, pools, val_cases, cfg,
                        epochs=cfg.epochs_train, lr=cfg.lr_train,
                        trainable=model.trainable_params(),
                        oversample=oversample,
                        rng=np.random.default_rng(train_seq),
                        out_dir=out_dir, tag=f"{model.cfg.variant}")
    return model, log


def route_select(model: SegModel, sample_cases: list[dict]) -> tuple[str, dict[str, float]]:
    """Zero-shot router selection: score every registered center flag by
    mean Dice on the labeled samples; ties go to the lowest flag."""
    flags = sorted(model.registered_centers())
    if not flags:
        raise ConfigError("model has no registered routers")
    if not sample_cases:
        raise ContractError("route_select needs at least one labeled sample case")
    scores = {}
    for flag in flags:
        scores[flag] = mean_dice(model, [(c, flag) for c in sample_cases])
    best = max(flags, key=lambda f: scores[f])  # max keeps the first (lowest) flag on ties
    return best, scores


def finetune_closed(model: SegModel, flag: str, train_cases: list[dict],
                    val_case: dict, cfg: TrainConfig, *,
                    copy_from: str | None = None, out_dir=None) -> RunLog:
    """Closed-center fine-tuning: freeze the image encoder (and the organ
    extractor, which never enters the graph); train the decoder,
    alignment blocks, prompts, experts, and the new center's router."""
    seed_root = np.random.SeedSequence(cfg.seed + 1)
    reg_seq, train_seq = seed_root.spawn(2)
    if model.cfg.variant == "mome" and flag not in model.registered_centers():
        src = copy_from if cfg.closed_router_init == "copy" else None
        model.register_center(flag, rng=np.random.default_rng(reg_seq), copy_from=src)
    freeze = ("enc.",) if cfg.freeze_encoder_on_finetune else ()
    trainable = model.trainable_params(freeze_prefixes=freeze)
    if not trainable:
        raise ConfigError("fine-tuning has no trainable parameter groups")
    encoder_before = _digest_params(model, "enc.")
    log = _run_training(model, {flag: train_cases}, [(val_case, flag)], cfg,
                        epochs=cfg.epochs_finetune, lr=cfg.lr_finetune,
                        trainable=trainable, oversample={flag: 1},
                        rng=np.random.default_rng(train_seq),
                        out_dir=out_dir, tag=f"finetune_{flag}")
    if cfg.freeze_encoder_on_finetune and _digest_params(model, "enc.") != encoder_before:
        raise ContractError("frozen encoder parameters changed during fine-tuning")
    return log


def _digest_params(model: SegModel, prefix: str) -> str:
    h = hashlib.sha1()
    for name, p in sorted(model.params().items()):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


def gradient_isolation_report(model: SegModel, flag: str, batch: list[dict],
                              cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Backward one batch and report per-router gradient norms; routers
    of other centers must be exactly untouched (no gradient at all)."""
    params = model.params()
    for p in params.values():
        p.zero_grad()
    for case in batch:
        image = preprocess_hu(np.asarray(case["image"]))
        organ = _prepared_organ(case)
        record = case.get("record") if model.cfg.multimodal else None
        g = Graph()
        with g.recording():
            logits = model.forward(image, organ, record, flag, mode="train", rng=rng)
            loss = segmentation_loss(logits, case["ptv"].astype(np.float32),
                                     cfg.lambda_ce, cfg.lambda_dice)
        backward(g, loss)
    report = {}
    for name, p in params.items():
        if ".router." in name:
            report[name] = None if p.grad is None else float(np.abs(p.grad).max())
    for p in params.values():
        p.zero_grad()
    return report


def evaluate(model: SegModel, cases: list[dict], flag: str, *,
             seed: int = 0, hd95_mode: str = "pooled",
             report_path=None) -> tuple[list[CaseMetrics], dict]:
    """Per-case metrics plus bootstrap summaries; optionally writes the
    CSV report (per-case rows followed by summary rows)."""
    rows = []
    for case in cases:
        pred = predict_mask(model, case, flag)
        record = case.get("record")
        rows.append(case_metrics(
            case.get("case_id", ""), pred, case["ptv"], gtv=case.get("gtv"),
            spacing=case.get("spacing", model.cfg.spacing),
            risk="" if record is None else risk_group(record),
            center=case.get("center", ""), n_stage="" if record is None else record.n_stage,
            hd95_mode=hd95_mode))
    summaries = {}
    for metric in ("dice", "iou"):
        vals = [getattr(r, metric) for r in rows]
        summaries[metric] = bootstrap_ci(vals, seed=seed, metric=metric)
    hd_vals = [r.hd95_cm for r in rows if r.hd95_cm is not None]
    if len(hd_vals) >= 2:
        summaries["hd95_cm"] = bootstrap_ci(hd_vals, seed=seed, metric="hd95_cm")
    if report_path is not None:
        write_report(report_path, rows, list(summaries.values()))
    return rows, summaries


def ablate(cfg: TrainConfig, pools: dict[str, list[dict]],
           val_cases: list[tuple[dict, str]],
           test_sets: dict[str, list[dict]], *,
           methods=("text-prompt", "vanilla-moe", "mome"), ks=(2,),
           out_dir=None) -> list[dict]:
    """Train one model per (method, k) cell and evaluate on every test
    set; returns one result row per cell and center."""
    rows = []
    for method in methods:
        if method not in METHOD_VARIANTS:
            raise ConfigError(f"unknown ablation cell {method!r}")
        for k in ks:
            cell_cfg = TrainConfig(**{**json.loads(cfg.to_json()),
                                      "top_k": int(k), "variant": method,
                                      "centers": list(cfg.centers),
                                      "channels": list(cfg.channels),
                                      "grid": list(cfg.grid),
                                      "spacing": list(cfg.spacing)})
            model, _ = train_multicenter(cell_cfg, pools, val_cases, variant=method,
                                         out_dir=out_dir)
            for center, cases in test_sets.items():
                _, summaries = evaluate(model, cases, center, seed=cfg.seed)
                rows.append({
                    "method": method, "k": int(k), "center": center,
                    "dice_mean": summaries["dice"].mean,
                    "dice_ci_low": summaries["dice"].ci_low,
                    "dice_ci_high": summaries["dice"].ci_high,
                    "n": summaries["dice"].n,
                })
    return rows


# ---------------------------------------------------------------------------
# organ extractor training

def train_organ_model(cases: list[dict], *, grid, channels=(4, 8, 16, 32),
                      epochs: int = 4, lr: float = 1e-3, batch_size: int = 2,
                      seed: int = 0, out_dir=None) -> SegModel:
    """Supervised organ-extraction training on (image, organ) pairs."""
    cfg = ModelConfig(variant="vision-only", in_channels=1, channels=channels, grid=grid)
    seqs = np.random.SeedSequence(seed).spawn(2)
    model = SegModel(cfg, rng=np.random.default_rng(seqs[0]))
    opt = AdamW(model.trainable_params(), lr=lr)
    rng = np.random.default_rng(seqs[1])
    for _ in range(epochs):
        order = rng.permutation(len(cases))
        for i in range(0, len(order), batch_size):
            batch = [cases[j] for j in order[i:i + batch_size]]
            opt.zero_grad()
            for case in batch:
                image = preprocess_hu(np.asarray(case["image"]))
                g = Graph()
                with g.recording():
                    logits = model.forward(image, None, None, "A")
                    loss = segmentation_loss(logits, case["organ"].astype(np.float32))
                backward(g, loss)
            opt.scale_grads(1.0 / len(batch))
            opt.step()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / "organ.ckpt", extra_meta={"tag": "organ"})
    return model


def load_pools_from_dirs(data_dirs: dict[str, str]) -> dict[str, list[dict]]:
    return {flag: read_dataset(path) for flag, path in data_dirs.items()}
