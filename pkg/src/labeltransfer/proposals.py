"""Privileged proposal generation: augmented ground truth + cross-space
pseudo-labels, concatenated into the proposal set the fusion module and
heads consume. Replaces a learned region proposal stage."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .annotations import Box, Detection, ImageRecord
from .labelspace import GlobalIndex


def stable_hash(text: str) -> int:
    """Process-independent 63-bit hash for seeding per-image generators."""
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class AugConfig:
    p_jitter: float = 0.5
    p_remove: float = 0.05
    jitter_strength: float = 0.05

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls(p_jitter=0.0, p_remove=0.0, jitter_strength=0.0)


@dataclass(frozen=True)
class Proposal:
    box: Box
    global_class: int
    score_vector: np.ndarray  # length total+1, nonzero only on the source slice
    confidence: float
    is_gt: bool


@dataclass
class ProposalBatch:
    proposals: list[Proposal]
    image_id: str
    dataset_id: str

    def __len__(self) -> int:
        return len(self.proposals)

    @property
    def boxes(self) -> np.ndarray:
        return np.array(
            [[p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max] for p in self.proposals]
        )

    @property
    def score_matrix(self) -> np.ndarray:
        return np.stack([p.score_vector for p in self.proposals])


def jitter_box(
    box: Box, image_size: tuple[int, int], strength: float, rng: np.random.Generator
) -> Box:
    """Offset each corner by uniform noise within +-strength * side length.

    The result is clipped to the image; a degenerate draw is retried once
    and then the box passes through unjittered.
    """
    if strength == 0.0:
        return box
    w, h = image_size
    for _ in range(2):
        dx = rng.uniform(-strength * box.width, strength * box.width, size=2)
        dy = rng.uniform(-strength * box.height, strength * box.height, size=2)
        x0 = min(max(box.x_min + dx[0], 0.0), float(w))
        x1 = min(max(box.x_max + dx[1], 0.0), float(w))
        y0 = min(max(box.y_min + dy[0], 0.0), float(h))
        y1 = min(max(box.y_max + dy[1], 0.0), float(h))
        if x0 < x1 and y0 < y1:
            return Box(x0, y0, x1, y1)
    return box


def build_batch(
    record: ImageRecord,
    pseudo_by_space: dict[str, list[Detection]],
    index: GlobalIndex,
    native_space: str,
    aug: AugConfig,
    seed: int,
) -> ProposalBatch:
    """Assemble the proposal set for one image.

    Ground-truth boxes are independently removed with probability p_remove
    (never the last one) and jittered with probability p_jitter, then the
    pseudo detections for every other space follow in registration order.
    Boxes are clipped to the image; class labels are carried into the
    concatenated global index unchanged.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0x7FFFFFFF, stable_hash(record.image_id)])
    )
    width, height = record.size
    total = index.total
    proposals: list[Proposal] = []

    gt = record.annotations.get(native_space, [])
    removed = rng.uniform(size=len(gt)) < aug.p_remove if gt else np.zeros(0, bool)
    if len(gt) and removed.all():
        removed[0] = False
    jittered = rng.uniform(size=len(gt)) < aug.p_jitter if gt else np.zeros(0, bool)
    for i, det in enumerate(gt):
        if removed[i]:
            continue
        box = det.box
        if jittered[i]:
            box = jitter_box(box, record.size, aug.jitter_strength, rng)
        box = box.clipped(width, height)
        g = index.to_global(native_space, det.class_id)
        vec = np.zeros(total + 1)
        vec[g] = 1.0
        proposals.append(Proposal(box=box, global_class=g, score_vector=vec,
                                  confidence=1.0, is_gt=True))

    for space in index.spaces:
        if space.space_id == native_space:
            continue
        for det in pseudo_by_space.get(space.space_id, []):
            g = index.to_global(space.space_id, det.class_id)
            vec = np.zeros(total + 1)
            vec[g] = det.score
            proposals.append(
                Proposal(
                    box=det.box.clipped(width, height),
                    global_class=g,
                    score_vector=vec,
                    confidence=float(det.score),
                    is_gt=False,
                )
            )
    return ProposalBatch(proposals=proposals, image_id=record.image_id, dataset_id=record.dataset_id)


def confidence_vector(batch: ProposalBatch) -> np.ndarray:
    """Per-proposal reliability: 1 for ground truth, max class score otherwise."""
    out = np.empty(len(batch))
    for i, p in enumerate(batch.proposals):
        out[i] = 1.0 if p.is_gt else float(p.score_vector.max())
    return out
