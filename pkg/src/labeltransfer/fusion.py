"""Confidence-weighted attention over proposals.

Region features attend over all proposals in an image. Two value streams
are mixed: one carries class-score vectors over the concatenated label
space, the other carries region features discounted by per-proposal
confidence. The confidence-weighted branch is bounded row-wise by a
threshold tied to the dataset count, either by rescaling each row's max
to the threshold ("scaling") or by an elementwise min ("clamping").
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .proposals import ProposalBatch, confidence_vector

SCALING = "scaling"
CLAMPING = "clamping"
INV_SQRT_N = "inv_sqrt_n"
INV_N = "inv_n"


def threshold_for(num_datasets: int, t_rule: str) -> float:
    if num_datasets < 1:
        raise ValueError("need at least one dataset")
    if t_rule == INV_SQRT_N:
        return 1.0 / math.sqrt(num_datasets)
    if t_rule == INV_N:
        return 1.0 / num_datasets
    raise ValueError(f"unknown threshold rule {t_rule!r}")


def mode_variants() -> list[tuple[str, str]]:
    """The four (mode, t_rule) combinations of the attenuation ablation."""
    return [
        (CLAMPING, INV_N),
        (SCALING, INV_N),
        (CLAMPING, INV_SQRT_N),
        (SCALING, INV_SQRT_N),
    ]


@dataclass(frozen=True)
class SffConfig:
    attention_dim: int = 32
    mode: str = SCALING
    t_rule: str = INV_SQRT_N
    clamp_before_softmax: bool = False

    def __post_init__(self):
        if self.mode not in (SCALING, CLAMPING):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.t_rule not in (INV_SQRT_N, INV_N):
            raise ValueError(f"unknown threshold rule {self.t_rule!r}")
        if self.attention_dim <= 0:
            raise ValueError("attention_dim must be positive")


class SffParams:
    """Learned projections for the fusion attention.

    w_q, w_k, w_vr: feature_dim -> d; w_vc: (total+1) -> d. The threshold
    is 1/sqrt(N) or 1/N depending on the rule, with N the dataset count.
    """

    def __init__(
        self,
        feature_dim: int,
        score_dim: int,
        num_datasets: int,
        config: SffConfig,
        rng: np.random.Generator,
    ):
        d = config.attention_dim
        self.config = config
        self.feature_dim = feature_dim
        self.score_dim = score_dim
        self.num_datasets = num_datasets
        self.threshold = threshold_for(num_datasets, config.t_rule)
        self.w_q = nm.param(nm.uniform_init(rng, feature_dim, d))
        self.w_k = nm.param(nm.uniform_init(rng, feature_dim, d))
        self.w_vc = nm.param(nm.uniform_init(rng, score_dim, d))
        self.w_vr = nm.param(nm.uniform_init(rng, feature_dim, d))

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_vc": self.w_vc, "w_vr": self.w_vr}

    @classmethod
    def from_tensors(
        cls,
        feature_dim: int,
        score_dim: int,
        num_datasets: int,
        config: SffConfig,
        tensors: dict[str, Tensor],
    ) -> "SffParams":
        obj = cls.__new__(cls)
        obj.config = config
        obj.feature_dim = feature_dim
        obj.score_dim = score_dim
        obj.num_datasets = num_datasets
        obj.threshold = threshold_for(num_datasets, config.t_rule)
        obj.w_q = tensors["w_q"]
        obj.w_k = tensors["w_k"]
        obj.w_vc = tensors["w_vc"]
        obj.w_vr = tensors["w_vr"]
        return obj


@dataclass
class FusionTrace:
    attention: np.ndarray  # raw similarity, M x M
    attention_softmax: np.ndarray  # row-softmax of the raw similarity
    attention_weighted: np.ndarray  # final weighting applied to region values
    fused: np.ndarray  # M x d output


def attention_matrix(roi_feats: Tensor, params: SffParams) -> Tensor:
    """Scaled dot-product similarity between projected region features."""
    q = nm.matmul(roi_feats, params.w_q)
    k = nm.matmul(roi_feats, params.w_k)
    return nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(params.config.attention_dim))


def _attenuate(a: Tensor, mode: str, t: float) -> Tensor:
    if mode == SCALING:
        return nm.scale_rows_to_max(a, t)
    return nm.clamp_rows(a, t)


def fuse(
    roi_feats: Tensor, batch: ProposalBatch, params: SffParams
) -> tuple[Tensor, FusionTrace]:
    """Fused features: softmax(A) V_c plus the attenuated, confidence-
    discounted softmax of A applied to V_r.

    Confidence discounting scales column j of A by S_c[j]: attention paid
    to proposal j is reduced when j is unreliable. The plain-softmax branch
    stays unattenuated.
    """
    if len(batch) != roi_feats.value.shape[0]:
        raise ValueError(
            f"batch of {len(batch)} proposals vs {roi_feats.value.shape[0]} feature rows"
        )
    cfg = params.config
    a = attention_matrix(roi_feats, params)
    a_soft = nm.row_softmax(a)
    v_c = nm.matmul(Tensor(batch.score_matrix), params.w_vc)
    v_r = nm.matmul(roi_feats, params.w_vr)

    s_c = confidence_vector(batch)
    discounted = nm.scale_columns(a, s_c)
    if cfg.clamp_before_softmax:
        weighted = nm.row_softmax(_attenuate(discounted, cfg.mode, params.threshold))
    else:
        weighted = _attenuate(nm.row_softmax(discounted), cfg.mode, params.threshold)

    fused = nm.add(nm.matmul(a_soft, v_c), nm.matmul(weighted, v_r))
    trace = FusionTrace(
        attention=a.value.copy(),
        attention_softmax=a_soft.value.copy(),
        attention_weighted=weighted.value.copy(),
        fused=fused.value.copy(),
    )
    return fused, trace
