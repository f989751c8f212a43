"""Transfer model assembly: fusion + masked heads, the training loop with
EMA shadow weights, and inference-time re-labeling into a target space."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .annotations import Box, Detection, ImageRecord, Origin, iou, nms, filter_by_score, round9
from .features import FeatureModel, FeatureMap, roi_pool_many
from .fusion import SffConfig, SffParams, fuse
from .labelspace import GlobalIndex, LabelSpace, mask_offsets, masked_softmax
from .numerics import Tensor
from .persist import load_weights, save_weights
from .proposals import AugConfig, ProposalBatch, build_batch, confidence_vector
from .training import EmaState, NumericalDivergenceError, choose_domain, sgd_step

MATCH_IOU = 0.5


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 0.05
    batch_size: int = 4
    strategy: str = "mixed"
    fine_tune_fraction: float = 1.0 / 3.0
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.strategy == "fine_tune" and not (0.0 < self.fine_tune_fraction < 1.0):
            raise ValueError("fine_tune_fraction must lie in (0, 1)")


# regression targets are divided by these (the usual bbox stds) so typical
# offsets land at O(1), where the Huber loss still has healthy gradients
DELTA_STD = np.array([0.1, 0.1, 0.2, 0.2])


def encode_deltas(proposal: Box, target: Box) -> np.ndarray:
    """Normalized (dx/w, dy/h, log w-ratio, log h-ratio) of the target
    relative to the proposal."""
    pw, ph = proposal.width, proposal.height
    pcx, pcy = proposal.center
    tcx, tcy = target.center
    raw = np.array(
        [
            (tcx - pcx) / pw,
            (tcy - pcy) / ph,
            math.log(target.width / pw),
            math.log(target.height / ph),
        ]
    )
    return raw / DELTA_STD


def apply_deltas(proposal: Box, deltas: np.ndarray, image_size: tuple[int, int]) -> Box | None:
    """Invert encode_deltas and clip; None when clipping degenerates the box."""
    deltas = np.asarray(deltas, dtype=np.float64) * DELTA_STD
    pw, ph = proposal.width, proposal.height
    pcx, pcy = proposal.center
    cx = pcx + float(deltas[0]) * pw
    cy = pcy + float(deltas[1]) * ph
    w = pw * math.exp(min(float(deltas[2]), 4.0))
    h = ph * math.exp(min(float(deltas[3]), 4.0))
    x0, x1 = cx - w / 2, cx + w / 2
    y0, y1 = cy - h / 2, cy + h / 2
    iw, ih = image_size
    x0, x1 = max(0.0, min(x0, iw)), max(0.0, min(x1, iw))
    y0, y1 = max(0.0, min(y0, ih)), max(0.0, min(y1, ih))
    if x0 >= x1 or y0 >= y1:
        return None
    return Box(x0, y0, x1, y1)


class LatModel:
    """Fusion parameters plus classification/regression heads over the
    concatenated label space (+ shared background).

    Regression is class-specific (one 4-delta block per global class), so
    box conventions are learned per class and the target-space masking at
    inference selects target-convention geometry.
    """

    def __init__(self, index: GlobalIndex, sff_config: SffConfig, feature_dim: int, seed: int):
        self.index = index
        self.sff_config = sff_config
        self.feature_dim = feature_dim
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A70]))
        score_dim = index.total + 1
        self.sff = SffParams(feature_dim, score_dim, index.num_spaces, sff_config, rng)
        # heads read the proposal's raw features and class-score vector next
        # to the fused context, keeping identity and context separable; a
        # small relu trunk adds corrective capacity on top of the linear paths
        base_dim = feature_dim + score_dim + sff_config.attention_dim
        hidden = 64
        head_dim = base_dim + hidden
        self.w_h = nm.param(nm.uniform_init(rng, base_dim, hidden))
        self.b_h = nm.param(np.zeros((1, hidden)))
        self.w_cls = nm.param(nm.uniform_init(rng, head_dim, score_dim))
        self.b_cls = nm.param(np.zeros((1, score_dim)))
        self.w_reg = nm.param(nm.uniform_init(rng, head_dim, 4 * score_dim))
        self.b_reg = nm.param(np.zeros((1, 4 * score_dim)))
        self.ema: dict[str, np.ndarray] | None = None
        self.train_log: list[float] = []

    def parameters(self) -> dict[str, Tensor]:
        p = dict(self.sff.parameters())
        p.update(
            {
                "w_h": self.w_h,
                "b_h": self.b_h,
                "w_cls": self.w_cls,
                "b_cls": self.b_cls,
                "w_reg": self.w_reg,
                "b_reg": self.b_reg,
            }
        )
        return p

    def _weights_as_tensors(self, weights: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in weights.items()}

    def forward(
        self,
        fmap: FeatureMap,
        batch: ProposalBatch,
        weights: dict[str, np.ndarray] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Logits (M x total+1) over the full concatenation, and per-class
        deltas (M x 4(total+1)); select a class's block with `deltas_for`."""
        roi = Tensor(roi_pool_many(fmap, [p.box for p in batch.proposals]))
        if weights is None:
            tensors = self.parameters()
        else:
            tensors = self._weights_as_tensors(weights)
        sff = SffParams.from_tensors(
            self.feature_dim,
            self.index.total + 1,
            self.index.num_spaces,
            self.sff_config,
            tensors,
        )
        fused, _ = fuse(roi, batch, sff)
        base = nm.concat_cols(nm.concat_cols(roi, Tensor(batch.score_matrix)), fused)
        trunk = nm.relu(nm.linear(base, tensors["w_h"], tensors["b_h"]))
        head_in = nm.concat_cols(base, trunk)
        logits = nm.linear(head_in, tensors["w_cls"], tensors["b_cls"])
        deltas = nm.linear(head_in, tensors["w_reg"], tensors["b_reg"])
        return logits, deltas


def deltas_for(deltas: Tensor, classes) -> Tensor:
    """The 4-delta block of each row's given (global) class."""
    return nm.gather_blocks(deltas, classes, 4)


def match_proposals(
    batch: ProposalBatch, gt: list[Detection], index: GlobalIndex, native_space: str
) -> tuple[np.ndarray, list[int]]:
    """Best-ground-truth assignment at IoU >= 0.5.

    Returns per-proposal global class targets (background for unmatched)
    and the matched ground-truth index per proposal (-1 when background).
    """
    m = len(batch)
    targets = np.full(m, index.background, dtype=np.int64)
    matched = [-1] * m
    for i, prop in enumerate(batch.proposals):
        best, best_iou = -1, MATCH_IOU
        for j, det in enumerate(gt):
            v = iou(prop.box, det.box)
            if v > best_iou or (best == -1 and v == best_iou):
                best, best_iou = j, v
        if best >= 0:
            targets[i] = index.to_global(native_space, gt[best].class_id)
            matched[i] = best
    return targets, matched


def training_loss(
    logits: Tensor,
    deltas: Tensor,
    batch: ProposalBatch,
    record: ImageRecord,
    index: GlobalIndex,
    native_space: str | None = None,
) -> Tensor:
    """Masked weighted cross-entropy plus smooth-L1 on matched proposals.

    Classification logits are additively masked to the current dataset's
    space plus background; per-proposal weights are the confidence vector.
    Regression supervises every IoU-matched proposal (ground-truth or
    pseudo origin) against its matched ground-truth geometry.
    """
    if native_space is None:
        keys = list(record.annotations.keys())
        if len(keys) != 1:
            raise ValueError("native_space is ambiguous; pass it explicitly")
        native_space = keys[0]
    gt = record.annotations.get(native_space, [])
    targets, matched = match_proposals(batch, gt, index, native_space)
    weights = confidence_vector(batch)
    m = len(batch)

    mask = index.space_mask(native_space)
    masked_logits = nm.add(logits, Tensor(mask_offsets(mask)[None, :]))
    cls_loss = nm.scale(nm.weighted_cross_entropy(masked_logits, targets, weights), 1.0 / m)

    fg = np.array([j >= 0 for j in matched], dtype=float)
    delta_targets = np.zeros((m, 4))
    for i, j in enumerate(matched):
        if j >= 0:
            delta_targets[i] = encode_deltas(batch.proposals[i].box, gt[j].box)
    n_fg = max(1.0, fg.sum())
    # class-specific regression: only the assigned class's block is supervised
    # (background rows select block 0 but carry zero weight)
    reg_classes = np.where(targets == index.background, 0, targets)
    assigned = deltas_for(deltas, reg_classes)
    reg_loss = nm.scale(nm.smooth_l1(assigned, delta_targets, fg), 1.0 / n_fg)
    return nm.add(cls_loss, reg_loss)


@dataclass
class LatTrainInputs:
    """Everything the training loop needs, staged per dataset."""

    index: GlobalIndex
    feature_model: FeatureModel
    records: dict[str, list[ImageRecord]]  # train-split records per dataset
    scenes: dict[str, dict[str, object]]  # dataset -> image_id -> SceneSpec
    pseudo: dict[tuple[str, str], dict[str, list[Detection]]]  # (dataset, space) -> image -> dets
    dataset_space: dict[str, str]
    target_dataset: str | None = None
    aug: AugConfig = field(default_factory=AugConfig)

    def pseudo_for(self, dataset_id: str, image_id: str) -> dict[str, list[Detection]]:
        out = {}
        for (ds, space), per_image in self.pseudo.items():
            if ds == dataset_id:
                out[space] = per_image.get(image_id, [])
        return out


def train_lat(inputs: LatTrainInputs, sff_config: SffConfig, config: TrainConfig) -> LatModel:
    """SGD over images sampled per the batch strategy; EMA tracks every step."""
    model = LatModel(
        inputs.index, sff_config, inputs.feature_model.feature_dim + 4, config.seed
    )
    params = model.parameters()
    ema = EmaState(params, config.ema_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5A5A]))
    domains = sorted(inputs.records.keys())

    for it in range(config.iterations):
        losses = []
        try:
            for slot in range(config.batch_size):
                ds = choose_domain(
                    config.strategy,
                    domains,
                    inputs.target_dataset,
                    it,
                    config.iterations,
                    config.batch_size,
                    slot,
                    config.fine_tune_fraction,
                    rng,
                )
                recs = inputs.records[ds]
                rec = recs[rng.integers(len(recs))]
                scene = inputs.scenes[ds][rec.image_id]
                fmap = inputs.feature_model.render(scene)
                batch = build_batch(
                    rec,
                    inputs.pseudo_for(ds, rec.image_id),
                    inputs.index,
                    inputs.dataset_space[ds],
                    inputs.aug,
                    seed=(config.seed * 1_000_003 + it * config.batch_size + slot) & 0x7FFFFFFF,
                )
                if len(batch) == 0:
                    continue
                logits, deltas = model.forward(fmap, batch)
                losses.append(
                    training_loss(logits, deltas, batch, rec, inputs.index, inputs.dataset_space[ds])
                )
        except FloatingPointError as e:
            raise NumericalDivergenceError(
                f"parameters overflowed at iteration {it}: {e}", model.train_log
            ) from e
        if not losses:
            continue
        total = losses[0]
        for extra in losses[1:]:
            total = nm.add(total, extra)
        total = nm.scale(total, 1.0 / len(losses))
        loss_value = float(total.value)
        if not np.isfinite(loss_value):
            raise NumericalDivergenceError(
                f"loss diverged at iteration {it}", model.train_log
            )
        model.train_log.append(loss_value)
        nm.zero_grads(list(params.values()))
        total.backward()
        sgd_step(params, config.learning_rate)
        ema.update(params)

    model.ema = ema.values()
    return model


def transfer_annotations(
    model: LatModel,
    inputs: LatTrainInputs,
    target_space: str,
    tau: float = 0.5,
    nms_iou: float = 0.5,
    datasets: list[str] | None = None,
    use_ema: bool = True,
) -> dict[str, list[ImageRecord]]:
    """Re-express every dataset's annotations in the target label space.

    Proposal building runs with augmentation disabled; logits are masked
    to the target space plus background; background-argmax proposals are
    dropped, deltas applied, then class-wise NMS and score thresholding.
    """
    index = model.index
    if target_space not in [s.space_id for s in index.spaces]:
        raise KeyError(f"unknown target space {target_space!r}")
    mask = index.space_mask(target_space)
    offset = index.offset(target_space)
    weights = model.ema if (use_ema and model.ema is not None) else None
    out: dict[str, list[ImageRecord]] = {}
    for ds in datasets if datasets is not None else sorted(inputs.records.keys()):
        out[ds] = []
        for rec in inputs.records[ds]:
            scene = inputs.scenes[ds][rec.image_id]
            fmap = inputs.feature_model.render(scene)
            batch = build_batch(
                rec,
                inputs.pseudo_for(ds, rec.image_id),
                index,
                inputs.dataset_space[ds],
                AugConfig.disabled(),
                seed=0,
            )
            dets: list[Detection] = []
            if len(batch) > 0:
                logits, deltas = model.forward(fmap, batch, weights=weights)
                probs = masked_softmax(logits.value, mask)
                for i, prop in enumerate(batch.proposals):
                    g = int(np.argmax(probs[i]))
                    if g == index.background:
                        continue
                    score = float(probs[i, g])
                    box = apply_deltas(prop.box, deltas.value[i, 4 * g : 4 * g + 4], rec.size)
                    if box is None:
                        continue
                    dets.append(
                        Detection(
                            box=box.quantized(),
                            class_id=g - offset,
                            score=min(round9(score), 0.999999999),
                            origin=Origin.pseudo("lat"),
                        )
                    )
            dets = nms(filter_by_score(dets, tau), nms_iou)
            out[ds].append(
                ImageRecord(rec.image_id, rec.dataset_id, rec.size, {target_space: dets})
            )
    return out


def collect_fusion_traces(
    model: LatModel,
    inputs: LatTrainInputs,
    datasets: list[str] | None = None,
    limit: int = 16,
    use_ema: bool = True,
) -> dict[str, dict]:
    """Per-image attention matrices for diagnostics (first `limit` images)."""
    weights = model.ema if (use_ema and model.ema is not None) else {
        k: p.value for k, p in model.parameters().items()
    }
    tensors = {k: Tensor(v) for k, v in weights.items()}
    sff = SffParams.from_tensors(
        model.feature_dim, model.index.total + 1, model.index.num_spaces,
        model.sff_config, tensors,
    )
    out: dict[str, dict] = {}
    for ds in datasets if datasets is not None else sorted(inputs.records.keys()):
        for rec in inputs.records[ds]:
            if len(out) >= limit:
                return out
            scene = inputs.scenes[ds][rec.image_id]
            fmap = inputs.feature_model.render(scene)
            batch = build_batch(
                rec, inputs.pseudo_for(ds, rec.image_id), model.index,
                inputs.dataset_space[ds], AugConfig.disabled(), seed=0,
            )
            if len(batch) == 0:
                continue
            roi = Tensor(roi_pool_many(fmap, [p.box for p in batch.proposals]))
            _, trace = fuse(roi, batch, sff)
            out[rec.image_id] = {
                "attention": [[round9(v) for v in row] for row in trace.attention.tolist()],
                "attention_weighted": [
                    [round9(v) for v in row] for row in trace.attention_weighted.tolist()
                ],
                "confidence": [round9(v) for v in confidence_vector(batch).tolist()],
            }
    return out


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: LatModel, path, config_hash: str = "", seed: int | None = None) -> None:
    header = {
        "kind": "lat-model",
        "spaces": [[s.space_id, list(s.class_names)] for s in model.index.spaces],
        "sff": {
            "attention_dim": model.sff_config.attention_dim,
            "mode": model.sff_config.mode,
            "t_rule": model.sff_config.t_rule,
            "clamp_before_softmax": model.sff_config.clamp_before_softmax,
        },
        "feature_dim": model.feature_dim,
        "config_hash": config_hash,
        "seed": model.seed if seed is None else seed,
    }
    arrays = {k: p.value for k, p in model.parameters().items()}
    if model.ema is not None:
        for k, v in model.ema.items():
            arrays[f"ema__{k}"] = v
    save_weights(path, header, arrays)


def load_checkpoint(path) -> LatModel:
    header, arrays = load_weights(path)
    if header.get("kind") != "lat-model":
        raise ValueError(f"{path}: not a transfer-model checkpoint")
    index = GlobalIndex(
        tuple(LabelSpace(sid, tuple(names)) for sid, names in header["spaces"])
    )
    sff_config = SffConfig(
        attention_dim=header["sff"]["attention_dim"],
        mode=header["sff"]["mode"],
        t_rule=header["sff"]["t_rule"],
        clamp_before_softmax=header["sff"]["clamp_before_softmax"],
    )
    model = LatModel(index, sff_config, header["feature_dim"], header["seed"])
    ema: dict[str, np.ndarray] = {}
    for k, p in model.parameters().items():
        p.value = arrays[k].copy()
    for k in arrays:
        if k.startswith("ema__"):
            ema[k[len("ema__"):]] = arrays[k].copy()
    model.ema = ema or None
    return model
