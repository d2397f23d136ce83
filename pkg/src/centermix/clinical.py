"""Structured clinical records and their context-token encoding.

A record carries exactly the five curated template fields (grade,
stage, metastasis, age, PSA) plus treatment metadata. The encoder maps
each field to one token via a fixed sinusoidal featurization of the
normalized value plus a learned per-field bias row, then appends
learnable prompt tokens, replacing a frozen language-model backbone at
desk scale.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, ops
from .exceptions import ValidationError

T_STAGES = ("T1", "T2", "T3", "T4")
T_SUBS = ("", "a", "b", "c")
N_STAGES = ("N0", "N1")
METASTASIS = ("negative", "unknown")
INTENTS = ("definitive", "postoperative", "salvage")

RISK_GROUPS = ("low", "intermediate", "high", "very_high")

RECORD_KEYS = ("grade", "stage", "metastasis", "age", "psa")

# Normalization constants, frozen for reproducibility.
PSA_LOG_MEAN = 3.0
PSA_LOG_STD = 1.5
AGE_MIN = 18.0
AGE_MAX = 110.0
PROJECTION_SEED = 20240901


@dataclass(frozen=True)
class ClinicalRecord:
    gleason_grade: int
    t_stage: str
    n_stage: str
    metastasis: str
    age: float
    psa: float
    prostatectomy: bool
    therapy_intent: str
    t_sub: str = ""

    def __post_init__(self):
        if not (5 <= self.gleason_grade <= 10):
            raise ValidationError(f"gleason_grade {self.gleason_grade} outside [5, 10]")
        if self.t_stage not in T_STAGES:
            raise ValidationError(f"unknown T stage {self.t_stage!r}")
        if self.t_sub not in T_SUBS:
            raise ValidationError(f"unknown T sub-stage {self.t_sub!r}")
        if self.n_stage not in N_STAGES:
            raise ValidationError(f"unknown N stage {self.n_stage!r}")
        if self.metastasis not in METASTASIS:
            raise ValidationError(f"unknown metastasis value {self.metastasis!r}")
        if not (AGE_MIN <= self.age <= AGE_MAX):
            raise ValidationError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")
        if self.psa < 0:
            raise ValidationError(f"psa {self.psa} must be non-negative")
        if self.therapy_intent not in INTENTS:
            raise ValidationError(f"unknown therapy intent {self.therapy_intent!r}")

    @property
    def stage_text(self) -> str:
        prefix = "p" if self.prostatectomy else "c"
        return f"{prefix}{self.t_stage}{self.t_sub} {self.n_stage}"


def risk_group(record: ClinicalRecord) -> str:
    """Documented stand-in risk grouping over (gleason, T stage, PSA).

    very_high iff T4 or gleason >= 9; high iff T3 or gleason 8 or
    psa > 20; intermediate iff T2 or gleason 7 or 10 < psa <= 20;
    otherwise low. Total and deterministic; age and therapy intent are
    ignored by construction. Isolated here so it can be swapped.
    """
    g = record.gleason_grade
    t = record.t_stage
    psa = record.psa
    if t == "T4" or g >= 9:
        return "very_high"
    if t == "T3" or g == 8 or psa > 20:
        return "high"
    if t == "T2" or g == 7 or 10 < psa <= 20:
        return "intermediate"
    return "low"


def psa_cluster(psa: float) -> int:
    """PSA stratification bins; boundary values go to the higher bin."""
    if psa < 0:
        raise ValidationError(f"psa {psa} must be non-negative")
    for i, upper in enumerate((5.0, 10.0, 20.0, 30.0)):
        if psa < upper:
            return i
    return 4


# ---------------------------------------------------------------------------
# serialization (exactly the five template keys plus generator metadata)

def record_to_json(record: ClinicalRecord, meta: dict | None = None) -> dict:
    obj = {
        "grade": int(record.gleason_grade),
        "stage": record.stage_text,
        "metastasis": record.metastasis,
        "age": float(record.age),
        "psa": float(record.psa),
        "meta": {
            "prostatectomy": bool(record.prostatectomy),
            "therapy_intent": record.therapy_intent,
        },
    }
    if meta:
        obj["meta"].update(meta)
    return obj


_STAGE_RE = re.compile(r"^([pc])(T[1-4])([abc]?) (N[01])$")


def record_from_json(obj: dict, strict: bool = True) -> ClinicalRecord:
    if strict:
        unknown = set(obj) - set(RECORD_KEYS) - {"meta"}
        if unknown:
            raise ValidationError(f"unknown record keys: {sorted(unknown)}")
    missing = set(RECORD_KEYS) - set(obj)
    if missing:
        raise ValidationError(f"missing record keys: {sorted(missing)}")
    m = _STAGE_RE.match(str(obj["stage"]))
    if not m:
        raise ValidationError(f"unparseable stage {obj['stage']!r}")
    prefix, t_stage, t_sub, n_stage = m.groups()
    meta = obj.get("meta", {})
    prostatectomy = bool(meta.get("prostatectomy", prefix == "p"))
    if prostatectomy != (prefix == "p"):
        raise ValidationError("stage prefix disagrees with prostatectomy flag")
    return ClinicalRecord(
        gleason_grade=int(obj["grade"]),
        t_stage=t_stage,
        t_sub=t_sub,
        n_stage=n_stage,
        metastasis=str(obj["metastasis"]),
        age=float(obj["age"]),
        psa=float(obj["psa"]),
        prostatectomy=prostatectomy,
        therapy_intent=str(meta.get("therapy_intent", "definitive")),
    )


# ---------------------------------------------------------------------------
# context encoding

def _sinusoid(value: float, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of a normalized scalar."""
    half = dim // 2
    freqs = (math.pi / 2.0) * (64.0 ** (np.arange(half) / max(half - 1, 1)))
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(value * freqs)
    out[1::2] = np.cos(value * freqs)
    return out


@dataclass
class ContextEmbedding:
    tokens: Tensor          # [L, D]
    n_fields: int
    n_prompts: int

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


class ContextEncoder:
    """Deterministic field featurizer with learnable prompt tokens.

    Field-token rows are a pure function of the record given fixed
    parameters; the per-field bias rows and the prompt rows are the
    trainable parts. Categorical fields are one-hot encoded and passed
    through a fixed seeded projection. When a center name is supplied
    (text-prompt variant) one extra categorical token is appended ahead
    of the prompts.
    """

    N_FIELDS = 5

    def __init__(self, dim: int = 32, n_prompts: int = 8, rng: np.random.Generator | None = None,
                 centers: tuple[str, ...] = (), dtype=np.float32):
        self.dim = dim
        self.n_prompts = n_prompts
        self.centers = tuple(centers)
        self.dtype = np.dtype(dtype)
        fixed = np.random.default_rng(PROJECTION_SEED)
        self._stage_proj = fixed.normal(size=(12, dim)) / math.sqrt(12)
        self._meta_proj = fixed.normal(size=(2, dim)) / math.sqrt(2)
        self._center_proj = fixed.normal(size=(8, dim)) / math.sqrt(8)
        init = rng if rng is not None else np.random.default_rng(0)
        self.field_bias = Tensor(np.zeros((self.N_FIELDS, dim), dtype=self.dtype), requires_grad=True)
        self.prompts = Tensor((init.normal(size=(n_prompts, dim)) * 0.02).astype(self.dtype),
                              requires_grad=True)

    def params(self, prefix: str = "context.") -> dict[str, Tensor]:
        return {prefix + "field_bias": self.field_bias, prefix + "prompts": self.prompts}

    def _field_rows(self, r: ClinicalRecord, center: str | None) -> np.ndarray:
        rows = np.zeros((self.N_FIELDS + (1 if center is not None else 0), self.dim), dtype=np.float64)
        rows[0] = _sinusoid((r.gleason_grade - 5.0) / 5.0, self.dim)
        stage_hot = np.zeros(12)
        stage_hot[T_STAGES.index(r.t_stage)] = 1.0
        stage_hot[4 + T_SUBS.index(r.t_sub)] = 1.0
        stage_hot[8 + N_STAGES.index(r.n_stage)] = 1.0
        stage_hot[10 + (1 if r.prostatectomy else 0)] = 1.0
        rows[1] = stage_hot @ self._stage_proj
        meta_hot = np.zeros(2)
        meta_hot[METASTASIS.index(r.metastasis)] = 1.0
        rows[2] = meta_hot @ self._meta_proj
        rows[3] = _sinusoid((r.age - AGE_MIN) / (AGE_MAX - AGE_MIN), self.dim)
        rows[4] = _sinusoid((math.log1p(r.psa) - PSA_LOG_MEAN) / PSA_LOG_STD, self.dim)
        if center is not None:
            if center not in self.centers:
                raise ValidationError(f"center {center!r} not registered with encoder")
            hot = np.zeros(8)
            hot[self.centers.index(center) % 8] = 1.0
            rows[5] = hot @ self._center_proj
        return rows

    def encode_record(self, record: ClinicalRecord, center: str | None = None) -> ContextEmbedding:
        rows = self._field_rows(record, center)
        base = Tensor(rows.astype(self.dtype))
        if center is None:
            fields = ops.add(base, self.field_bias)
        else:
            # bias applies to the five record fields only
            pad = np.zeros((1, self.dim), dtype=self.dtype)
            bias = ops.concat_rows(self.field_bias, Tensor(pad))
            fields = ops.add(base, bias)
        tokens = ops.concat_rows(fields, self.prompts)
        return ContextEmbedding(tokens=tokens, n_fields=rows.shape[0], n_prompts=self.n_prompts)
