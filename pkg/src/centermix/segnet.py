"""Volumetric segmentation networks.

A four-level residual encoder/decoder consumes the CT image with the
organ mask as a second channel. In the multimodal variants every
encoder level feeds its flattened tokens through an alignment block and
(for the mixture variants) a routed expert mixture before the features
continue downward and into the skip connection. The decoder mirrors the
encoder with nearest-neighbour upsampling and channel-concatenated
skips; a final convolution emits single-channel logits on the input
grid.

Variants:
    mome         alignment + per-center routed mixtures
    vanilla-moe  alignment + one shared router for every center flag
    text-prompt  alignment only; the center enters as an extra context token
    vision-only  plain encoder/decoder, both modules bypassed
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .alignment import AlignmentBlock
from .clinical import ClinicalRecord, ContextEncoder, ContextEmbedding
from .engine import Tensor, ops, save_params, load_params
from .exceptions import ConfigError, ContractError, DimensionError, RoutingError
from .moe import CenterMoE

VARIANTS = ("mome", "vanilla-moe", "text-prompt", "vision-only")

HU_LOW = -200.0
HU_HIGH = 250.0

SHARED_FLAG = "SHARED"


def preprocess_hu(raw: np.ndarray) -> np.ndarray:
    """Truncate HU to [-200, 250] and map linearly onto [0, 1]."""
    clipped = np.clip(raw, HU_LOW, HU_HIGH)
    return ((clipped - HU_LOW) / (HU_HIGH - HU_LOW)).astype(np.float32)


@dataclass
class Volume:
    data: np.ndarray                      # [C, H, W, S] float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise DimensionError(f"volume must be [C,H,W,S], got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ContractError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("volume intensities must be finite")

    @property
    def grid(self):
        return self.data.shape[1:]


@dataclass
class MaskVolume:
    data: np.ndarray                      # [H, W, S] in {0, 1}
    role: str = "organ"                   # organ | gtv | ptv | prediction
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4 and arr.ndim != 3:
            raise DimensionError(f"mask must be [H,W,S], got {arr.shape}")
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise DimensionError(f"mask must be single channel, got {arr.shape}")
            arr = arr[0]
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ContractError(f"mask values must be binary, found {uniq[:5]}")
        self.data = arr.astype(np.uint8)

    @property
    def grid(self):
        return self.data.shape


@dataclass
class ModelConfig:
    variant: str = "mome"
    in_channels: int = 2
    channels: tuple[int, ...] = (8, 16, 32, 64)   # level 3 (top) .. level 0 (bottom)
    context_dim: int = 32
    prompt_tokens: int = 8
    n_experts: int = 8
    top_k: int = 2
    centers: tuple[str, ...] = ("A", "B", "C")
    grid: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    noise_at_inference: bool = False
    aux_balance: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(self.channels) != 4:
            raise ConfigError("the backbone uses exactly four levels")
        if any(d < 1 for d in self.grid):
            raise ConfigError(f"grid dims must be positive, got {self.grid}")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"top_k={self.top_k} outside [1, {self.n_experts}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["centers"] = list(self.centers)
        d["grid"] = list(self.grid)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "centers", "grid", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @property
    def multimodal(self) -> bool:
        return self.variant != "vision-only"

    @property
    def uses_mixture(self) -> bool:
        return self.variant in ("mome", "vanilla-moe")


def plan_strides(grid) -> tuple[list[tuple[int, int, int]], list[tuple[int, int, int]]]:
    """Per-transition downsampling strides and the resulting level dims.

    An axis is halved only while its current dim is even, so the decoder
    (which mirrors the strides as upsampling factors) reproduces the
    input grid exactly for any input dims. Coarse axes simply stop
    downsampling, which suits anisotropic grids.
    """
    dims = tuple(int(d) for d in grid)
    level_dims = [dims]
    strides = []
    for _ in range(3):
        stride = tuple(2 if d % 2 == 0 and d >= 2 else 1 for d in dims)
        dims = tuple(d // s for d, s in zip(dims, stride))
        strides.append(stride)
        level_dims.append(dims)
    return strides, level_dims


class _ConvUnit:
    """conv3d -> instance norm -> relu."""

    def __init__(self, cin, cout, stride, rng, dtype):
        std = np.sqrt(2.0 / (cin * 27))
        self.w = Tensor((rng.normal(size=(cout, cin, 3, 3, 3)) * std).astype(dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride

    def params(self, prefix):
        return {prefix + "w": self.w, prefix + "gamma": self.gamma, prefix + "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(ops.instance_norm(ops.conv3d(x, self.w, self.stride), self.gamma, self.beta))


class _ResBlock:
    def __init__(self, ch, rng, dtype):
        self.unit1 = _ConvUnit(ch, ch, 1, rng, dtype)
        std = np.sqrt(2.0 / (ch * 27))
        self.w2 = Tensor((rng.normal(size=(ch, ch, 3, 3, 3)) * std).astype(dtype), requires_grad=True)
        self.gamma2 = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta2 = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)

    def params(self, prefix):
        out = self.unit1.params(prefix + "conv1.")
        out.update({prefix + "conv2.w": self.w2, prefix + "conv2.gamma": self.gamma2,
                    prefix + "conv2.beta": self.beta2})
        return out

    def __call__(self, x: Tensor) -> Tensor:
        h = self.unit1(x)
        h = ops.instance_norm(ops.conv3d(h, self.w2, 1), self.gamma2, self.beta2)
        return ops.relu(ops.add(x, h))


class SegModel:
    """Encoder/decoder with optional per-level alignment and mixtures."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        c3, c2, c1, c0 = cfg.channels
        dt = self.dtype
        self.down_strides, self.level_dims = plan_strides(cfg.grid)

        self.enc_stem = _ConvUnit(cfg.in_channels, c3, 1, rng, dt)
        self.enc_res = {3: _ResBlock(c3, rng, dt)}
        self.enc_down = {}
        for level, stride, (cin, cout) in zip((2, 1, 0), self.down_strides,
                                              ((c3, c2), (c2, c1), (c1, c0))):
            self.enc_down[level] = _ConvUnit(cin, cout, stride, rng, dt)
            self.enc_res[level] = _ResBlock(cout, rng, dt)

        self.dec_up = {}
        self.dec_fuse = {}
        for level, (cin, cout) in zip((1, 2, 3), ((c0, c1), (c1, c2), (c2, c3))):
            self.dec_up[level] = _ConvUnit(cin, cout, 1, rng, dt)
            self.dec_fuse[level] = _ConvUnit(2 * cout, cout, 1, rng, dt)
        std = np.sqrt(2.0 / (c3 * 27))
        self.head_w = Tensor((rng.normal(size=(1, c3, 3, 3, 3)) * std).astype(dt), requires_grad=True)

        self.context: Optional[ContextEncoder] = None
        self.align: dict[int, AlignmentBlock] = {}
        self.moe: dict[int, CenterMoE] = {}
        if cfg.multimodal:
            enc_centers = cfg.centers if cfg.variant == "text-prompt" else ()
            self.context = ContextEncoder(cfg.context_dim, cfg.prompt_tokens, rng=rng,
                                          centers=enc_centers, dtype=dt)
            moe_centers = cfg.centers if cfg.variant == "mome" else (SHARED_FLAG,)
            for level, ch in zip((3, 2, 1, 0), cfg.channels):
                dims = self.level_dims[3 - level]
                self.align[level] = AlignmentBlock(level, cfg.context_dim, ch, dims, rng, dtype=dt)
                if cfg.uses_mixture:
                    self.moe[level] = CenterMoE(ch, cfg.n_experts, cfg.top_k, moe_centers,
                                                rng=rng, dtype=dt,
                                                noise_at_inference=cfg.noise_at_inference)

    # -- parameters -----------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.enc_stem.params("enc.l3.stem."))
        for level in (3, 2, 1, 0):
            if level in self.enc_down:
                out.update(self.enc_down[level].params(f"enc.l{level}.down."))
            out.update(self.enc_res[level].params(f"enc.l{level}.res."))
        for level in (1, 2, 3):
            out.update(self.dec_up[level].params(f"dec.l{level}.up."))
            out.update(self.dec_fuse[level].params(f"dec.l{level}.fuse."))
        out["dec.head.w"] = self.head_w
        if self.context is not None:
            out.update(self.context.params("context."))
        for level in sorted(self.align, reverse=True):
            out.update(self.align[level].params(f"align.l{level}."))
        for level in sorted(self.moe, reverse=True):
            out.update(self.moe[level].params(f"moe.l{level}."))
        return out

    def trainable_params(self, freeze_prefixes: tuple[str, ...] = ()) -> dict[str, Tensor]:
        return {name: p for name, p in self.params().items()
                if p.requires_grad
                and not any(name.startswith(pref) for pref in freeze_prefixes)}

    def router_registry(self) -> list[dict]:
        flags = self.registered_centers()
        return [{"flag": flag,
                 "prefixes": [f"moe.l{level}.router.{flag}." for level in sorted(self.moe, reverse=True)]}
                for flag in flags]

    def registered_centers(self) -> list[str]:
        if not self.moe:
            return list(self.cfg.centers)
        any_level = next(iter(self.moe.values()))
        return list(any_level.routers)

    def register_center(self, flag: str, rng: np.random.Generator, copy_from: str | None = None) -> None:
        if not self.moe:
            raise ConfigError(f"variant {self.cfg.variant!r} has no per-center routers")
        for level in sorted(self.moe, reverse=True):
            self.moe[level].register_center(flag, rng=rng, copy_from=copy_from)

    # -- forward ---------------------------------------------------------

    def _route_flag(self, flag: str) -> str:
        if self.cfg.variant == "vanilla-moe":
            return SHARED_FLAG
        return flag

    def encode_context(self, record: ClinicalRecord, flag: str) -> ContextEmbedding:
        if self.context is None:
            raise ContractError("vision-only variant has no context encoder")
        center = flag if self.cfg.variant == "text-prompt" else None
        return self.context.encode_record(record, center=center)

    def forward(self, image: np.ndarray, organ: Optional[np.ndarray],
                context: ContextEmbedding | ClinicalRecord | None, flag: str,
                mode: str = "infer", rng: np.random.Generator | None = None,
                route_log: list | None = None, aux: list | None = None) -> Tensor:
        """Logits on the input grid. ``image`` is already [0, 1]-normalized."""
        if self.cfg.variant == "mome" and flag not in self.registered_centers():
            raise RoutingError(f"center {flag!r} has no registered router")
        chans = [np.asarray(image, dtype=self.dtype)]
        if self.cfg.in_channels == 2:
            if organ is None:
                raise ContractError("this model expects an organ-mask channel")
            if organ.shape != image.shape:
                raise DimensionError(f"organ grid {organ.shape} != image grid {image.shape}")
            chans.append(np.asarray(organ, dtype=self.dtype))
        x = Tensor(np.stack(chans, axis=0))

        g: Optional[ContextEmbedding] = None
        if self.cfg.multimodal:
            if isinstance(context, ClinicalRecord):
                g = self.encode_context(context, flag)
            elif isinstance(context, ContextEmbedding):
                g = context
            else:
                raise ContractError("multimodal variants require a record or context embedding")

        h = self.enc_res[3](self.enc_stem(x))
        skips = {}
        for level in (3, 2, 1, 0):
            if level != 3:
                h = self.enc_res[level](self.enc_down[level](h))
            h = self._fuse_level(h, g, level, flag, mode, rng, route_log, aux)
            skips[level] = h

        d = skips[0]
        for level, stride in zip((1, 2, 3), reversed(self.down_strides)):
            d = self.dec_up[level](ops.upsample_nearest(d, stride))
            d = self.dec_fuse[level](ops.concat_channels(d, skips[level]))
        return ops.squeeze_channel(ops.conv3d(d, self.head_w, 1))

    def _fuse_level(self, h: Tensor, g, level: int, flag: str, mode, rng, route_log, aux) -> Tensor:
        if not self.cfg.multimodal:
            return h
        dims = h.shape[1:]
        tokens = ops.flatten_tokens(h)
        tokens = self.align[level].fuse(tokens, g.tokens)
        if self.cfg.uses_mixture:
            moe = self.moe[level]
            eff = self._route_flag(flag)
            sink: list = []
            tokens = moe.forward(tokens, eff, mode=mode, rng=rng,
                                 route_log=route_log, gate_sink=sink)
            if aux is not None and self.cfg.aux_balance > 0:
                # squared coefficient of variation of per-expert importance;
                # rows sum to 1, so mean importance is the constant T/E
                weights = sink[0].weights
                n_tok, n_exp = weights.shape
                importance = ops.reduce_sum(weights, axis=0)
                mean = Tensor(np.full(n_exp, n_tok / n_exp, dtype=weights.dtype))
                centered = ops.sub(importance, mean)
                var = ops.reduce_mean(ops.mul(centered, centered))
                aux.append(ops.scale(var, self.cfg.aux_balance * (n_exp / n_tok) ** 2))
        return ops.tokens_to_volume(tokens, dims)

    def forward_case(self, case, flag: str, mode: str = "infer",
                     rng: np.random.Generator | None = None,
                     route_log: list | None = None, aux: list | None = None) -> Tensor:
        """Forward from a case mapping with raw-HU image and organ mask."""
        image = preprocess_hu(np.asarray(case["image"]))
        organ = case.get("organ_input", case.get("organ"))
        organ = None if organ is None else np.asarray(organ)
        record = case.get("record") if self.cfg.multimodal else None
        return self.forward(image, organ, record, flag, mode=mode, rng=rng,
                            route_log=route_log, aux=aux)

    @property
    def n_experts(self) -> int:
        return self.cfg.n_experts

    # -- persistence ------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "segmodel", "model_config": self.cfg.to_dict(),
                "router_registry": self.router_registry()}
        if self.moe:
            meta["registered_centers"] = self.registered_centers()
        if extra_meta:
            meta.update(extra_meta)
        save_params(path, self.params(), meta=meta)

    @classmethod
    def load(cls, path) -> "SegModel":
        arrays, meta = load_params(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        model = cls(cfg, rng=np.random.default_rng(0))
        for flag in meta.get("registered_centers", []):
            if flag not in model.registered_centers():
                model.register_center(flag, rng=np.random.default_rng(0))
        params = model.params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, arr in arrays.items():
            params[name].data = arr.astype(model.dtype)
        return model


# ---------------------------------------------------------------------------
# organ extraction

def organ_model_config(grid=(32, 32, 16), channels=(4, 8, 16, 32)) -> ModelConfig:
    return ModelConfig(variant="vision-only", in_channels=1, channels=channels, grid=grid)


def segment_organ(x: Volume, organ_model: SegModel | None = None,
                  oracle_mask: MaskVolume | None = None) -> MaskVolume:
    """Binary organ mask from the frozen extraction model.

    With ``oracle_mask`` given, returns it unchanged (generator ground
    truth passthrough). Otherwise thresholds sigmoid(logits) at 0.5;
    the boundary value itself maps to background.
    """
    if oracle_mask is not None:
        if oracle_mask.grid != x.grid:
            raise DimensionError(f"oracle mask grid {oracle_mask.grid} != volume grid {x.grid}")
        return oracle_mask
    if organ_model is None:
        raise ContractError("segment_organ needs a model or an oracle mask")
    if x.grid != tuple(organ_model.cfg.grid):
        logits = sliding_window_logits(
            lambda win: organ_model.forward(win, None, None, "A").data,
            x.data[0], tuple(organ_model.cfg.grid))
    else:
        logits = organ_model.forward(x.data[0], None, None, "A").data
    return MaskVolume((logits > 0.0).astype(np.uint8), role="organ", spacing=x.spacing)


# ---------------------------------------------------------------------------
# loss and sliding-window inference

def segmentation_loss(logits: Tensor, target: np.ndarray,
                      lambda_ce: float = 1.0, lambda_dice: float = 1.0) -> Tensor:
    """lambda_ce * BCE + lambda_dice * (1 - softDice), eps = 1e-5."""
    y = np.asarray(target, dtype=logits.dtype)
    ce = ops.bce_with_logits(logits, y)
    dice = ops.soft_dice_loss(logits, y, eps=1e-5)
    return ops.add(ops.scale(ce, lambda_ce), ops.scale(dice, lambda_dice))


def sliding_window_logits(forward_fn, volume: np.ndarray, window: tuple[int, int, int],
                          stride: tuple[int, int, int] | None = None) -> np.ndarray:
    """Tile a larger volume with half-window strides and average overlaps."""
    dims = volume.shape
    if any(d < w for d, w in zip(dims, window)):
        raise DimensionError(f"volume {dims} smaller than window {window}")
    stride = stride or tuple(max(w // 2, 1) for w in window)
    acc = np.zeros(dims, dtype=np.float64)
    cnt = np.zeros(dims, dtype=np.float64)

    def starts(dim, win, st):
        out = list(range(0, dim - win + 1, st))
        if out[-1] != dim - win:
            out.append(dim - win)
        return out

    for i in starts(dims[0], window[0], stride[0]):
        for j in starts(dims[1], window[1], stride[1]):
            for k in starts(dims[2], window[2], stride[2]):
                sl = (slice(i, i + window[0]), slice(j, j + window[1]), slice(k, k + window[2]))
                acc[sl] += forward_fn(volume[sl])
                cnt[sl] += 1.0
    return (acc / cnt).astype(np.float32)
