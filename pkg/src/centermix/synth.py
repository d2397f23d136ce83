"""Reproducible synthetic multicenter datasets.

Each center policy couples three things: clinical-field distributions
(tumor stage, grade, PSA, surgery and intent mix), a delineation policy
(margin size and the probability of prophylactic nodal irradiation per
risk group), and an intensity style (noise and blur mimicking scanner
differences).

A case is an ellipsoidal organ phantom in a soft-tissue body. The gross
target is the organ itself for definitive intent and the eroded organ
("bed") after surgery. The planning target dilates the gross target
with an anisotropy-aware structuring element; when nodal irradiation
fires (Bernoulli per risk group; node-positive cases always include
nodes), two lateral node tubes -- expanded by the same margin, as a
clinical margin applies to the full target -- are unioned in. Low
planning-target ratios therefore mark nodal cases, giving the bimodal
ratio distribution the behavioral tests rely on.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .clinical import ClinicalRecord, psa_cluster, risk_group
from .exceptions import ContractError

DEFAULT_GRID = (32, 32, 16)
DEFAULT_SPACING = (1.0, 1.0, 3.0)

_T_STAGES = ("T1", "T2", "T3", "T4")
_INTENTS = ("definitive", "postoperative", "salvage")


@dataclass
class CenterPolicy:
    flag: str
    pni_rule: dict[str, float]
    ptv_margin_voxels: int
    t_dist: tuple[float, ...]            # T1..T4
    gleason_dist: tuple[float, ...]      # grades 5..10
    n1_rate: float
    psa_log_mu: float
    psa_log_sigma: float
    intent_dist: tuple[float, ...]       # definitive, postoperative, salvage
    metastasis_unknown_rate: float
    noise_sigma: float
    blur_sigma: float

    def __post_init__(self):
        if not (0 <= self.ptv_margin_voxels <= 5):
            raise ContractError(f"margin {self.ptv_margin_voxels} outside [0, 5] at desk scale")
        for k, p in self.pni_rule.items():
            if not (0.0 <= p <= 1.0):
                raise ContractError(f"pni probability {p} for {k} outside [0, 1]")
        for name in ("t_dist", "gleason_dist", "intent_dist"):
            probs = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(probs.sum() - 1.0) > 1e-6 or np.any(probs < 0):
                raise ContractError(f"{name} must be a probability vector, got {probs}")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(values) -> tuple[float, ...]:
    arr = np.asarray(values, dtype=np.float64)
    return tuple(arr / arr.sum())


def build_default_policies() -> dict[str, CenterPolicy]:
    """Five centers: A/B aggressive (frequent nodal coverage, wide
    margins), C conservative, D/E close to C with distinct scanners."""
    ab_pni = {"low": 0.05, "intermediate": 0.7, "high": 0.95, "very_high": 1.0}
    c_pni = {"low": 0.0, "intermediate": 0.15, "high": 0.7, "very_high": 0.9}
    return {
        "A": CenterPolicy(
            flag="A", pni_rule=dict(ab_pni), ptv_margin_voxels=3,
            t_dist=_norm((4.1, 30.6, 57.7, 7.6)),
            gleason_dist=_norm((2.6, 5.4, 41.1, 19.4, 29.1, 2.5)),
            n1_rate=0.103, psa_log_mu=math.log(39.3), psa_log_sigma=1.3,
            intent_dist=_norm((34.9, 9.6, 55.7)), metastasis_unknown_rate=0.05,
            noise_sigma=8.0, blur_sigma=0.6),
        "B": CenterPolicy(
            flag="B", pni_rule=dict(ab_pni), ptv_margin_voxels=3,
            t_dist=_norm((0.7, 40.1, 48.9, 10.2)),
            gleason_dist=_norm((0.0, 12.4, 41.6, 16.1, 25.5, 4.4)),
            n1_rate=0.139, psa_log_mu=math.log(27.7), psa_log_sigma=1.0,
            intent_dist=_norm((59.9, 10.2, 29.9)), metastasis_unknown_rate=0.05,
            noise_sigma=9.0, blur_sigma=0.6),
        "C": CenterPolicy(
            flag="C", pni_rule=dict(c_pni), ptv_margin_voxels=1,
            t_dist=_norm((6.7, 52.3, 32.9, 8.1)),
            gleason_dist=_norm((0.0, 11.4, 47.0, 14.8, 23.5, 3.4)),
            n1_rate=0.081, psa_log_mu=math.log(22.2), psa_log_sigma=0.95,
            intent_dist=_norm((53.0, 2.0, 45.0)), metastasis_unknown_rate=0.05,
            noise_sigma=16.0, blur_sigma=1.1),
        "D": CenterPolicy(
            flag="D", pni_rule={"low": 0.0, "intermediate": 0.1, "high": 0.6, "very_high": 0.85},
            ptv_margin_voxels=1,
            t_dist=_norm((55.3, 18.5, 26.2, 0.001)),
            gleason_dist=_norm((0.0, 9.2, 58.5, 12.3, 20.0, 0.001)),
            n1_rate=0.154, psa_log_mu=math.log(12.5), psa_log_sigma=1.1,
            intent_dist=_norm((86.2, 4.6, 9.2)), metastasis_unknown_rate=0.85,
            noise_sigma=25.0, blur_sigma=0.9),
        "E": CenterPolicy(
            flag="E", pni_rule={"low": 0.0, "intermediate": 0.2, "high": 0.65, "very_high": 0.85},
            ptv_margin_voxels=2,
            t_dist=_norm((32.3, 30.1, 34.4, 3.2)),
            gleason_dist=_norm((0.0, 9.6, 57.0, 16.1, 16.1, 1.1)),
            n1_rate=0.075, psa_log_mu=math.log(9.5), psa_log_sigma=1.1,
            intent_dist=_norm((67.7, 21.5, 10.8)), metastasis_unknown_rate=0.85,
            noise_sigma=15.0, blur_sigma=1.2),
    }


_T_SUB_CHOICES = {
    "T1": (("c", "a", "b"), (0.7, 0.15, 0.15)),
    "T2": (("a", "b", "c"), (0.5, 0.3, 0.2)),
    "T3": (("a", "b"), (0.7, 0.3)),
    "T4": (("",), (1.0,)),
}


def sample_record(policy: CenterPolicy, rng: np.random.Generator) -> ClinicalRecord:
    t_stage = _T_STAGES[rng.choice(4, p=policy.t_dist)]
    subs, sub_p = _T_SUB_CHOICES[t_stage]
    t_sub = subs[rng.choice(len(subs), p=sub_p)]
    gleason = 5 + int(rng.choice(6, p=policy.gleason_dist))
    n_stage = "N1" if rng.random() < policy.n1_rate else "N0"
    metastasis = "unknown" if rng.random() < policy.metastasis_unknown_rate else "negative"
    psa = float(np.clip(rng.lognormal(policy.psa_log_mu, policy.psa_log_sigma), 0.3, 4000.0))
    age = float(np.clip(rng.normal(68.0, 8.0), 45.0, 90.0))
    intent = _INTENTS[rng.choice(3, p=policy.intent_dist)]
    return ClinicalRecord(
        gleason_grade=gleason, t_stage=t_stage, t_sub=t_sub, n_stage=n_stage,
        metastasis=metastasis, age=round(age), psa=round(psa, 2),
        prostatectomy=(intent != "definitive"), therapy_intent=intent)


def _ellipsoid(grid, center, semiaxes) -> np.ndarray:
    idx = np.indices(grid, dtype=np.float64)
    acc = np.zeros(grid, dtype=np.float64)
    for ax in range(3):
        acc += ((idx[ax] - center[ax]) / semiaxes[ax]) ** 2
    return acc <= 1.0


def _margin_structure(margin: int, spacing) -> np.ndarray | None:
    """Ellipsoidal structuring element honoring spacing anisotropy."""
    if margin <= 0:
        return None
    rz = int(round(margin * spacing[0] / spacing[2]))
    shape = (2 * margin + 1, 2 * margin + 1, 2 * rz + 1)
    center = (margin, margin, rz)
    semi = (margin + 1e-9, margin + 1e-9, max(rz, 1e-9) if rz else 1e-9)
    if rz == 0:
        elem = np.zeros(shape, dtype=bool)
        disk = _ellipsoid(shape[:2] + (1,), (margin, margin, 0), (margin, margin, 1.0))
        elem[:, :, 0] = disk[:, :, 0]
        return elem
    return _ellipsoid(shape, center, semi)


def _dilate(mask: np.ndarray, margin: int, spacing) -> np.ndarray:
    elem = _margin_structure(margin, spacing)
    if elem is None:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=elem)


def _node_tubes(grid, organ_center, rng) -> np.ndarray:
    """Two lateral node chains: radius-2 tubes offset +-8 voxels,
    running cranially from the organ center."""
    h, w, s = grid
    ic, jc, kc = organ_center
    k_lo = max(int(kc) - 2, 1)
    k_hi = min(int(kc) + 8, s - 2)
    tubes = np.zeros(grid, dtype=bool)
    ii, jj = np.indices((h, w), dtype=np.float64)
    for off in (-8.0, 8.0):
        disk = (ii - (ic + off)) ** 2 + (jj - jc) ** 2 <= 2.0 ** 2
        tubes[:, :, k_lo:k_hi + 1] |= disk[:, :, None]
    return tubes


def generate_case(policy: CenterPolicy, rng: np.random.Generator, *,
                  grid=DEFAULT_GRID, spacing=DEFAULT_SPACING,
                  force_pni: bool | None = None, case_id: str = "",
                  max_retries: int = 20) -> dict:
    """One synthetic case; bitwise deterministic for (policy, rng state)."""
    record = sample_record(policy, rng)
    for _ in range(max_retries):
        center = (
            grid[0] / 2 + rng.uniform(-2.0, 2.0),
            grid[1] / 2 + rng.uniform(-2.0, 2.0),
            grid[2] / 2 + rng.uniform(-1.0, 1.0),
        )
        semi = (rng.uniform(5.0, 6.5), rng.uniform(5.0, 6.5), rng.uniform(2.2, 3.2))
        organ = _ellipsoid(grid, center, semi)
        interior = np.zeros(grid, dtype=bool)
        interior[1:-1, 1:-1, 1:-1] = True
        if organ.any() and not (organ & ~interior).any():
            break
    else:
        raise ContractError("could not place a non-degenerate organ phantom")

    if record.therapy_intent == "definitive":
        gtv = organ.copy()
    else:
        eroded = ndimage.binary_erosion(organ, structure=_margin_structure(1, spacing))
        gtv = eroded if eroded.any() else organ.copy()

    if force_pni is not None:
        pni = bool(force_pni)
    elif record.n_stage == "N1":
        pni = True
    else:
        pni = rng.random() < policy.pni_rule[risk_group(record)]

    ptv = _dilate(gtv, policy.ptv_margin_voxels, spacing)
    if pni:
        tubes = _node_tubes(grid, center, rng)
        ptv |= _dilate(tubes, policy.ptv_margin_voxels, spacing)

    body = _ellipsoid(grid, (grid[0] / 2, grid[1] / 2, grid[2] / 2),
                      (grid[0] * 0.47, grid[1] * 0.47, grid[2]))
    hu = np.full(grid, -100.0)
    hu[body] = 20.0
    hu[organ] = 70.0
    hu += rng.normal(0.0, policy.noise_sigma, size=grid)
    if policy.blur_sigma > 0:
        zb = policy.blur_sigma * spacing[0] / spacing[2]
        hu = ndimage.gaussian_filter(hu, sigma=(policy.blur_sigma, policy.blur_sigma, zb))

    case = {
        "case_id": case_id,
        "image": hu.astype(np.float32),
        "organ": organ.astype(np.uint8),
        "gtv": gtv.astype(np.uint8),
        "ptv": ptv.astype(np.uint8),
        "record": record,
        "center": policy.flag,
        "pni_applied": pni,
        "spacing": tuple(spacing),
    }
    validate_case(case)
    return case


def validate_case(case: dict) -> None:
    gtv = case["gtv"].astype(bool)
    ptv = case["ptv"].astype(bool)
    organ = case["organ"].astype(bool)
    if (gtv & ~ptv).any():
        raise ContractError("gtv must be a subset of ptv")
    if case["record"].therapy_intent == "definitive" and not (organ & gtv).any():
        raise ContractError("definitive cases must keep organ and gtv overlapping")


def generate_dataset(policy: CenterPolicy, n: int, seed: int, *,
                     grid=DEFAULT_GRID, spacing=DEFAULT_SPACING) -> list[dict]:
    """n cases with one child rng stream per (seed, case index)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        out.append(generate_case(policy, rng, grid=grid, spacing=spacing,
                                 case_id=f"{policy.flag}{i:04d}"))
    return out


def dataset_meta(policy: CenterPolicy, seed: int, n: int) -> dict:
    return {"center": policy.flag, "seed": seed, "policy": policy.to_dict(), "count": n}


def sample_fewshot(cases: list[dict], n_per_cluster: int, rng: np.random.Generator):
    """Few-shot split: n cases per PSA cluster plus one validation case.

    Empty clusters are skipped with a warning. The validation case is
    drawn from the remaining pool. Deterministic under the rng seed.
    """
    if not cases:
        raise ContractError("sample_fewshot requires a non-empty dataset")
    by_cluster: dict[int, list[int]] = {c: [] for c in range(5)}
    for i, case in enumerate(cases):
        by_cluster[psa_cluster(case["record"].psa)].append(i)
    train_idx: list[int] = []
    for cluster in range(5):
        pool = by_cluster[cluster]
        if not pool:
            warnings.warn(f"PSA cluster {cluster} is empty; skipping", stacklevel=2)
            continue
        take = min(n_per_cluster, len(pool))
        if take < n_per_cluster:
            warnings.warn(f"PSA cluster {cluster} has only {take} cases", stacklevel=2)
        chosen = rng.choice(len(pool), size=take, replace=False)
        train_idx.extend(pool[i] for i in sorted(chosen))
    remaining = [i for i in range(len(cases)) if i not in set(train_idx)]
    if not remaining:
        raise ContractError("no case left for validation")
    val_idx = remaining[int(rng.integers(len(remaining)))]
    return [cases[i] for i in train_idx], cases[val_idx]


# ---------------------------------------------------------------------------
# distribution diagnostics

def two_means_split(values) -> dict:
    """Deterministic 1-D 2-means: initialized at the median, iterated to
    a fixed point. Returns cluster means, stds, and mass fractions."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size < 4:
        raise ContractError("need at least 4 values")
    split = np.median(v)
    for _ in range(100):
        lo = v[v <= split]
        hi = v[v > split]
        if lo.size == 0 or hi.size == 0:
            break
        new_split = (lo.mean() + hi.mean()) / 2.0
        if abs(new_split - split) < 1e-12:
            break
        split = new_split
    lo = v[v <= split]
    hi = v[v > split]
    return {
        "mu_low": float(lo.mean()), "mu_high": float(hi.mean()),
        "sd_low": float(lo.std()), "sd_high": float(hi.std()),
        "mass_low": lo.size / v.size, "mass_high": hi.size / v.size,
    }


def _smooth_hist(h: np.ndarray) -> np.ndarray:
    h = h.astype(np.float64)
    out = h.copy()
    out[1:-1] = (h[:-2] + 2 * h[1:-1] + h[2:]) / 4.0
    out[0] = (2 * h[0] + h[1]) / 3.0
    out[-1] = (h[-2] + 2 * h[-1]) / 3.0
    return out


def is_bimodal(values, bins: int = 16, valley_ratio: float = 0.5,
               min_mass: float = 0.03) -> bool:
    """Two-mode histogram heuristic.

    The histogram (``bins`` equal-width bins, [1,2,1]/4 smoothed) must
    contain two local maxima at least 3 bins apart whose intervening
    valley drops below ``valley_ratio`` of the smaller peak, with at
    least ``min_mass`` of the samples on each side of the valley. The
    mass floor rejects tail noise in unimodal data while still seeing
    minority modes such as the non-nodal population at nodal-heavy
    centers.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 20:
        raise ContractError("is_bimodal needs at least 20 values")
    h, _ = np.histogram(arr, bins=bins)
    s = _smooth_hist(h)
    peaks = [i for i in range(len(s))
             if (i == 0 or s[i] > s[i - 1]) and (i == len(s) - 1 or s[i] >= s[i + 1])]
    for ai in range(len(peaks)):
        for bi in range(ai + 1, len(peaks)):
            a, b = peaks[ai], peaks[bi]
            if b - a < 3:
                continue
            m = a + 1 + int(np.argmin(s[a + 1:b]))
            if s[m] > valley_ratio * min(s[a], s[b]):
                continue
            if min(h[:m].sum(), h[m + 1:].sum()) < min_mass * arr.size:
                continue
            return True
    return False
