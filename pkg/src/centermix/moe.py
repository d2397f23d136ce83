"""Noisy top-k gating with center-specific routers over shared experts.

Every registered center owns one router (a pair of weight matrices: a
clean scoring matrix and a noise-width matrix); the expert MLPs are
shared by all routers. In train mode per-token Gaussian noise scaled by
softplus(x @ W_noise) is added to the clean scores before top-k
selection; inference uses the clean scores only and is deterministic.
Non-selected experts are masked out of the softmax (realized as exact
zeros rather than -inf arithmetic) and are never evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Tensor, ops
from .exceptions import ConfigError, ContractError, DimensionError, RoutingError


@dataclass
class GateOutput:
    weights: Tensor                 # [T, E], exactly k nonzero per row
    selected: np.ndarray            # [T, k] expert indices, ascending score rank
    noise_sample: Optional[np.ndarray]  # [T, E] standard-normal draw, train only


def topk_mask(scores: np.ndarray, k: int):
    """Boolean keep-mask and per-row selected indices for the top-k scores.

    Ties break toward the lowest expert index (stable sort on negated
    scores). The mask is what KeepTop-k realizes: non-selected entries
    are excluded from the softmax entirely, which maps them to exact 0.
    """
    n = scores.shape[-1]
    if not (1 <= k <= n):
        raise ConfigError(f"k={k} outside [1, {n}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    selected = np.sort(order[..., :k], axis=-1)
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return mask, selected


class Expert:
    """Shared two-layer MLP: Ch -> 4*Ch -> Ch."""

    def __init__(self, ch: int, rng: np.random.Generator, dtype, init_std: float = 0.05):
        hidden = 4 * ch
        self.w1 = Tensor((rng.normal(size=(ch, hidden)) * init_std).astype(dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor((rng.normal(size=(hidden, ch)) * init_std).astype(dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)

    def params(self, prefix):
        return {prefix + "w1": self.w1, prefix + "b1": self.b1,
                prefix + "w2": self.w2, prefix + "b2": self.b2}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(ops.relu(ops.linear(x, self.w1, self.b1)), self.w2, self.b2)


class CenterMoE:
    """One expert-mixture layer with per-center routers.

    The mixture is residual: forward returns x + sum over selected
    experts of gate_weight * expert(x), applied token-wise with sparse
    dispatch (only selected experts run, on only their tokens).
    """

    def __init__(self, ch: int, n_experts: int = 8, k: int = 2,
                 centers=("A", "B", "C"), rng: np.random.Generator | None = None,
                 dtype=np.float32, noise_at_inference: bool = False):
        if not (1 <= k <= n_experts):
            raise ConfigError(f"k={k} must lie in [1, {n_experts}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ch = ch
        self.n_experts = n_experts
        self.k = k
        self.dtype = np.dtype(dtype)
        self.noise_at_inference = noise_at_inference
        self.experts = [Expert(ch, rng, self.dtype) for _ in range(n_experts)]
        self.routers: dict[str, dict[str, Tensor]] = {}
        for flag in centers:
            self.register_center(flag, rng=rng)

    def register_center(self, flag: str, rng: np.random.Generator, copy_from: str | None = None) -> None:
        if flag in self.routers:
            raise ConfigError(f"router for center {flag!r} already registered")
        if copy_from is not None:
            if copy_from not in self.routers:
                raise RoutingError(f"cannot copy router from unregistered center {copy_from!r}")
            src = self.routers[copy_from]
            self.routers[flag] = {
                "w": Tensor(src["w"].data.copy(), requires_grad=True),
                "w_noise": Tensor(src["w_noise"].data.copy(), requires_grad=True),
            }
            return
        std = 1.0 / np.sqrt(self.ch)
        self.routers[flag] = {
            "w": Tensor((rng.normal(size=(self.ch, self.n_experts)) * std).astype(self.dtype),
                        requires_grad=True),
            "w_noise": Tensor((rng.normal(size=(self.ch, self.n_experts)) * std).astype(self.dtype),
                              requires_grad=True),
        }

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, e in enumerate(self.experts):
            out.update(e.params(f"{prefix}expert{i}."))
        for flag, r in self.routers.items():
            out[f"{prefix}router.{flag}.w"] = r["w"]
            out[f"{prefix}router.{flag}.w_noise"] = r["w_noise"]
        return out

    def router_param_names(self, prefix: str, flag: str) -> tuple[str, str]:
        return (f"{prefix}router.{flag}.w", f"{prefix}router.{flag}.w_noise")

    def _scores(self, tokens: Tensor, flag: str, mode: str, rng) -> tuple[Tensor, Optional[np.ndarray]]:
        if flag not in self.routers:
            raise RoutingError(f"no router registered for center {flag!r}")
        if mode not in ("train", "infer"):
            raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
        router = self.routers[flag]
        clean = ops.matmul(tokens, router["w"])
        use_noise = mode == "train" or (mode == "infer" and self.noise_at_inference)
        if not use_noise:
            return clean, None
        if rng is None:
            raise ContractError("train-mode gating requires an explicit rng")
        eps = rng.standard_normal(size=clean.shape).astype(self.dtype)
        width = ops.softplus(ops.matmul(tokens, router["w_noise"]))
        return ops.add(clean, ops.mul(Tensor(eps), width)), eps

    def gate(self, tokens: Tensor, flag: str, mode: str = "infer",
             rng: np.random.Generator | None = None) -> GateOutput:
        if tokens.ndim != 2 or tokens.shape[1] != self.ch:
            raise DimensionError(f"gate tokens must be [T, {self.ch}], got {tokens.shape}")
        scores, eps = self._scores(tokens, flag, mode, rng)
        mask, selected = topk_mask(scores.data, self.k)
        weights = ops.masked_softmax(scores, mask)
        return GateOutput(weights=weights, selected=selected, noise_sample=eps)

    def forward(self, tokens: Tensor, flag: str, mode: str = "infer",
                rng: np.random.Generator | None = None,
                route_log: list | None = None,
                gate_sink: list | None = None) -> Tensor:
        gate_out = self.gate(tokens, flag, mode, rng)
        if route_log is not None:
            route_log.append(gate_out.selected)
        if gate_sink is not None:
            gate_sink.append(gate_out)
        out = tokens
        n_tokens = tokens.shape[0]
        for i in range(self.n_experts):
            rows = np.nonzero(gate_out.weights.data[:, i] > 0)[0]
            if rows.size == 0:
                continue
            xi = ops.gather_rows(tokens, rows)
            yi = self.experts[i](xi)
            wi = ops.gather_rows(ops.slice_cols(gate_out.weights, i, i + 1), rows)
            out = ops.add(out, ops.scatter_rows(ops.rowwise_mul(yi, wi), rows, n_tokens))
        return out


def expert_activation_histogram(cases, flag: str, model) -> np.ndarray:
    """Per-level expert-selection frequencies over a dataset.

    Runs inference once per case, counts how often each expert appears
    in the top-k selection at each mixture level, and normalizes by the
    level's total token count. Each row therefore sums to k. Rows are
    ordered with the bottom-most (deepest) mixture level first, i.e.
    row index equals the level number under the 0-is-bottom convention.

    ``model`` must expose ``forward_case(case, flag, route_log=...)``
    appending one [T, k] selection array per level, top level first.
    """
    cases = list(cases)
    if not cases:
        raise ContractError("expert_activation_histogram requires a non-empty dataset")
    counts: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = None
    for case in cases:
        log: list[np.ndarray] = []
        model.forward_case(case, flag, route_log=log)
        if counts is None:
            counts = np.zeros((len(log), model.n_experts), dtype=np.float64)
            tokens = np.zeros(len(log), dtype=np.float64)
        for lvl, selected in enumerate(reversed(log)):
            np.add.at(counts[lvl], selected.reshape(-1), 1.0)
            tokens[lvl] += selected.shape[0]
    return counts / tokens[:, None]
