"""Dataset label spaces, their concatenated global index, and logit masks.

Label sets from all datasets are concatenated rather than merged by name,
so identically-named classes from different datasets keep distinct global
indices. One shared background class sits after all spaces (global index
= total) and is visible under every mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_NEG = 1e9  # magnitude of the additive mask applied to excluded logits


@dataclass(frozen=True)
class LabelSpace:
    space_id: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        if not self.class_names:
            raise ValueError(f"label space {self.space_id!r} has no classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"duplicate class names in label space {self.space_id!r}")
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class GlobalIndex:
    """Concatenation of label spaces in registration order."""

    spaces: tuple[LabelSpace, ...]
    offsets: tuple[int, ...] = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        ids = [s.space_id for s in self.spaces]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate space ids {ids}")
        offsets, running = [], 0
        for s in self.spaces:
            offsets.append(running)
            running += len(s)
        object.__setattr__(self, "spaces", tuple(self.spaces))
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total", running)

    @property
    def background(self) -> int:
        """Global index of the shared background class."""
        return self.total

    @property
    def num_spaces(self) -> int:
        return len(self.spaces)

    def space(self, space_id: str) -> LabelSpace:
        for s in self.spaces:
            if s.space_id == space_id:
                return s
        raise KeyError(f"unknown label space {space_id!r}")

    def _space_pos(self, space_id: str) -> int:
        for i, s in enumerate(self.spaces):
            if s.space_id == space_id:
                return i
        raise KeyError(f"unknown label space {space_id!r}")

    def offset(self, space_id: str) -> int:
        return self.offsets[self._space_pos(space_id)]

    def to_global(self, space_id: str, local_class_id: int) -> int:
        pos = self._space_pos(space_id)
        if not (0 <= local_class_id < len(self.spaces[pos])):
            raise IndexError(
                f"class {local_class_id} outside label space {space_id!r} "
                f"of size {len(self.spaces[pos])}"
            )
        return self.offsets[pos] + local_class_id

    def to_local(self, global_index: int) -> tuple[str, int]:
        if not (0 <= global_index < self.total):
            raise IndexError(f"global index {global_index} outside [0, {self.total})")
        for pos in reversed(range(len(self.spaces))):
            if global_index >= self.offsets[pos]:
                return self.spaces[pos].space_id, global_index - self.offsets[pos]
        raise AssertionError("unreachable")

    def space_mask(self, space_id: str, include_background: bool = True) -> np.ndarray:
        """Boolean vector of length total+1: the space's slice plus background."""
        mask = np.zeros(self.total + 1, dtype=bool)
        pos = self._space_pos(space_id)
        start = self.offsets[pos]
        mask[start : start + len(self.spaces[pos])] = True
        if include_background:
            mask[self.total] = True
        return mask

    def class_names_global(self) -> list[str]:
        names = []
        for s in self.spaces:
            names.extend(f"{s.space_id}/{n}" for n in s.class_names)
        return names


def build_global_index(spaces: list[LabelSpace]) -> GlobalIndex:
    return GlobalIndex(tuple(spaces))


def mask_logits(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Additive -1e9 on excluded logits; preserves gradient-safe structure."""
    if logits.shape[-1] != mask.shape[0]:
        raise ValueError(f"logit width {logits.shape[-1]} != mask length {mask.shape[0]}")
    return logits + np.where(mask, 0.0, -MASK_NEG)


def mask_offsets(mask: np.ndarray) -> np.ndarray:
    """The additive vector realizing a mask (0 in-mask, -1e9 out-of-mask)."""
    return np.where(mask, 0.0, -MASK_NEG)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to the mask; out-of-mask mass is exactly 0."""
    z = mask_logits(np.asarray(logits, dtype=np.float64), mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mapping_table(index: GlobalIndex) -> str:
    """TSV diagnostic: space_id, local class name, global index."""
    lines = ["space_id\tclass_name\tglobal_index"]
    for s, off in zip(index.spaces, index.offsets):
        for local, name in enumerate(s.class_names):
            lines.append(f"{s.space_id}\t{name}\t{off + local}")
    lines.append(f"<background>\t<background>\t{index.total}")
    return "\n".join(lines) + "\n"
