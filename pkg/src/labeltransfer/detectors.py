"""Per-dataset toy detectors over dense grid anchors, cross-space
pseudo-label generation, and a deterministic noise-oracle pseudo-labeler
for tests and controlled experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .annotations import Box, Detection, ImageRecord, Origin, filter_by_score, iou, nms, round9
from .benchmark import SceneSpec, TaxonomyMap, evaluate_ap, transport
from .features import FeatureModel, FeatureMap, roi_pool_rects
from .labelspace import LabelSpace
from .model import apply_deltas, encode_deltas
from .numerics import Tensor
from .persist import load_weights, save_weights
from .proposals import stable_hash
from .training import EmaState, NumericalDivergenceError, choose_domain, sgd_step


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (A, 4) and (B, 4) corner-form boxes."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


_ANCHOR_CACHE: dict[tuple, np.ndarray] = {}


def grid_anchors(
    image_size: tuple[int, int], stride: float, scales: tuple[float, ...]
) -> np.ndarray:
    """One square anchor per feature cell per scale, clipped to the image."""
    key = (image_size, stride, scales)
    if key not in _ANCHOR_CACHE:
        w, h = image_size
        gw, gh = int(round(w / stride)), int(round(h / stride))
        cx = (np.arange(gw) + 0.5) * stride
        cy = (np.arange(gh) + 0.5) * stride
        xs, ys = np.meshgrid(cx, cy)
        centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
        rows = []
        for s in scales:
            half = s / 2.0
            box = np.concatenate([centers - half, centers + half], axis=1)
            box[:, 0] = np.clip(box[:, 0], 0, w)
            box[:, 1] = np.clip(box[:, 1], 0, h)
            box[:, 2] = np.clip(box[:, 2], 0, w)
            box[:, 3] = np.clip(box[:, 3], 0, h)
            rows.append(box)
        _ANCHOR_CACHE[key] = np.concatenate(rows, axis=0)
    return _ANCHOR_CACHE[key]


def anchor_features(fmap: FeatureMap, rects: np.ndarray) -> np.ndarray:
    """Whole-box + four-quadrant mean pooling, plus normalized geometry.

    The quadrant means give the heads the spatial asymmetry that a single
    mean pool cannot express, which regression needs to point at offsets.
    """
    full = roi_pool_rects(fmap, rects)  # pooled (d_f) ++ geometry (4)
    d_f = fmap.grid.shape[2]
    mx = 0.5 * (rects[:, 0] + rects[:, 2])
    my = 0.5 * (rects[:, 1] + rects[:, 3])
    quads = []
    for qx0, qy0, qx1, qy1 in (
        (rects[:, 0], rects[:, 1], mx, my),
        (mx, rects[:, 1], rects[:, 2], my),
        (rects[:, 0], my, mx, rects[:, 3]),
        (mx, my, rects[:, 2], rects[:, 3]),
    ):
        quad_rects = np.stack([qx0, qy0, qx1, qy1], axis=1)
        quads.append(roi_pool_rects(fmap, quad_rects)[:, :d_f])
    return np.concatenate([full[:, :d_f]] + quads + [full[:, d_f:]], axis=1)


@dataclass(frozen=True)
class DetectorConfig:
    iterations: int = 600
    learning_rate: float = 0.05
    batch_size: int = 4
    hidden_dim: int = 64
    anchor_scales: tuple[float, ...] = (24.0, 40.0, 64.0)
    ema_decay: float = 0.99
    strategy: str = "mixed"
    fine_tune_fraction: float = 1.0 / 3.0
    bg_per_fg: int = 3
    min_bg: int = 32
    score_floor: float = 0.05
    pre_nms_top: int = 300
    nms_iou: float = 0.5
    max_dets: int = 100
    ap_floor: float | None = 0.6


class DetectorConvergenceError(RuntimeError):
    def __init__(self, message: str, loss_history: list[float]):
        super().__init__(message)
        self.loss_history = loss_history


@dataclass
class DetectorExample:
    """One training image: scene for features, detections in the detector's
    space, per-annotation loss weights, and a domain tag for scheduling."""

    record: ImageRecord
    scene: SceneSpec
    dets: list[Detection]
    weights: np.ndarray
    domain: str

    @classmethod
    def from_ground_truth(cls, record: ImageRecord, scene: SceneSpec, space_id: str,
                          domain: str | None = None) -> "DetectorExample":
        dets = record.annotations.get(space_id, [])
        return cls(record, scene, dets, np.ones(len(dets)), domain or record.dataset_id)

    @classmethod
    def from_weighted(cls, record: ImageRecord, scene: SceneSpec, space_id: str,
                      domain: str | None = None) -> "DetectorExample":
        """Weights each annotation by its confidence score (1 for ground truth)."""
        dets = record.annotations.get(space_id, [])
        w = np.array([1.0 if d.origin.is_gt else d.score for d in dets])
        return cls(record, scene, dets, w, domain or record.dataset_id)


class ToyDetector:
    """Classification + regression heads over grid-anchor pooled features.

    Predicts only within its native label space plus background.
    """

    def __init__(self, dataset_id: str, space: LabelSpace, feature_model: FeatureModel,
                 config: DetectorConfig, seed: int):
        self.dataset_id = dataset_id
        self.space = space
        self.feature_model = feature_model
        self.config = config
        self.seed = seed
        in_dim = 5 * feature_model.feature_dim + 4
        n_cls = len(space) + 1  # + background
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD37E]))
        h = config.hidden_dim
        self.w1 = nm.param(nm.uniform_init(rng, in_dim, h))
        self.b1 = nm.param(np.zeros((1, h)))
        self.w_cls = nm.param(nm.uniform_init(rng, h, n_cls))
        self.b_cls = nm.param(np.zeros((1, n_cls)))
        self.w_reg = nm.param(nm.uniform_init(rng, h, 4))
        self.b_reg = nm.param(np.zeros((1, 4)))
        self.ema: dict[str, np.ndarray] | None = None
        self.train_log: list[float] = []

    @property
    def background(self) -> int:
        return len(self.space)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w_cls": self.w_cls, "b_cls": self.b_cls,
            "w_reg": self.w_reg, "b_reg": self.b_reg,
        }

    def _forward(self, feats: np.ndarray, weights: dict[str, np.ndarray] | None):
        if weights is None:
            t = self.parameters()
        else:
            t = {k: Tensor(v) for k, v in weights.items()}
        hidden = nm.relu(nm.linear(Tensor(feats), t["w1"], t["b1"]))
        logits = nm.linear(hidden, t["w_cls"], t["b_cls"])
        deltas = nm.linear(hidden, t["w_reg"], t["b_reg"])
        return logits, deltas

    def predict(self, scene: SceneSpec, use_ema: bool = True,
                score_floor: float | None = None) -> list[Detection]:
        """Detections in the native space after score floor + class-wise NMS."""
        cfg = self.config
        fmap = self.feature_model.render(scene)
        anchors = grid_anchors(fmap.image_size, self.feature_model.stride, cfg.anchor_scales)
        feats = anchor_features(fmap, anchors)
        weights = self.ema if (use_ema and self.ema is not None) else None
        logits, deltas = self._forward(feats, weights)
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        cls = p[:, : self.background].argmax(axis=1)
        score = p[np.arange(len(anchors)), cls]
        floor = cfg.score_floor if score_floor is None else score_floor
        keep = np.where(score >= floor)[0]
        keep = keep[np.argsort(-score[keep], kind="stable")][: cfg.pre_nms_top]
        dets = []
        for i in keep:
            box = apply_deltas(
                Box(*anchors[i]), deltas.value[i], fmap.image_size
            )
            if box is None:
                continue
            dets.append(
                Detection(
                    box=box.quantized(),
                    class_id=int(cls[i]),
                    score=min(round9(float(score[i])), 0.999999999),
                    origin=Origin.pseudo(self.dataset_id),
                )
            )
        return nms(dets, cfg.nms_iou)[: cfg.max_dets]


def _image_loss(det: ToyDetector, example: DetectorExample, rng: np.random.Generator):
    cfg = det.config
    fmap = det.feature_model.render(example.scene)
    anchors = grid_anchors(fmap.image_size, det.feature_model.stride, cfg.anchor_scales)
    gt_boxes = np.array(
        [[d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max] for d in example.dets]
    )
    m = iou_matrix(anchors, gt_boxes) if len(example.dets) else np.zeros((len(anchors), 0))
    if m.shape[1]:
        best = m.argmax(axis=1)
        best_iou = m[np.arange(len(anchors)), best]
    else:
        best = np.zeros(len(anchors), dtype=int)
        best_iou = np.zeros(len(anchors))
    fg = np.where(best_iou >= 0.5)[0]
    bg = np.where(best_iou < 0.5)[0]
    n_bg = min(len(bg), max(cfg.min_bg, cfg.bg_per_fg * max(1, len(fg))))
    bg = rng.choice(bg, size=n_bg, replace=False) if n_bg < len(bg) else bg
    sel = np.concatenate([fg, np.sort(bg)]).astype(int)

    feats = anchor_features(fmap, anchors[sel])
    targets = np.full(len(sel), det.background, dtype=np.int64)
    weights = np.ones(len(sel))
    delta_targets = np.zeros((len(sel), 4))
    fg_mask = np.zeros(len(sel))
    for row, i in enumerate(sel):
        if best_iou[i] >= 0.5:
            d = example.dets[best[i]]
            targets[row] = d.class_id
            weights[row] = example.weights[best[i]]
            delta_targets[row] = encode_deltas(Box(*anchors[i]), d.box)
            fg_mask[row] = 1.0
    logits, deltas = det._forward(feats, None)
    cls_loss = nm.scale(nm.weighted_cross_entropy(logits, targets, weights), 1.0 / len(sel))
    reg_loss = nm.scale(nm.smooth_l1(deltas, delta_targets, fg_mask), 1.0 / max(1.0, fg_mask.sum()))
    return nm.add(cls_loss, reg_loss)


def train_toy_detector(
    train_set: list[DetectorExample],
    dataset_id: str,
    space: LabelSpace,
    feature_model: FeatureModel,
    config: DetectorConfig,
    seed: int,
    target_domain: str | None = None,
) -> ToyDetector:
    """SGD + EMA over sampled images; optionally verifies a self-split AP floor."""
    if not train_set:
        raise ValueError("empty training set")
    det = ToyDetector(dataset_id, space, feature_model, config, seed)
    params = det.parameters()
    ema = EmaState(params, config.ema_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7D41]))
    by_domain: dict[str, list[DetectorExample]] = {}
    for ex in train_set:
        by_domain.setdefault(ex.domain, []).append(ex)
    domains = sorted(by_domain)

    for it in range(config.iterations):
        losses = []
        try:
            for slot in range(config.batch_size):
                domain = choose_domain(
                    config.strategy, domains, target_domain, it, config.iterations,
                    config.batch_size, slot, config.fine_tune_fraction, rng,
                )
                pool = by_domain[domain]
                ex = pool[rng.integers(len(pool))]
                losses.append(_image_loss(det, ex, rng))
        except FloatingPointError as e:
            raise NumericalDivergenceError(
                f"detector parameters overflowed at iteration {it}: {e}", det.train_log
            ) from e
        total = losses[0]
        for extra in losses[1:]:
            total = nm.add(total, extra)
        total = nm.scale(total, 1.0 / len(losses))
        value = float(total.value)
        if not np.isfinite(value):
            raise NumericalDivergenceError(f"detector loss diverged at iteration {it}", det.train_log)
        det.train_log.append(value)
        nm.zero_grads(list(params.values()))
        total.backward()
        sgd_step(params, config.learning_rate)
        ema.update(params)
    det.ema = ema.values()

    if config.ap_floor is not None:
        report = evaluate_detector(det, train_set)
        if report.map50 < config.ap_floor:
            raise DetectorConvergenceError(
                f"detector {dataset_id!r} reached train AP@0.5 "
                f"{report.map50:.3f} < floor {config.ap_floor}",
                det.train_log,
            )
    return det


def evaluate_detector(det: ToyDetector, examples: list[DetectorExample]):
    predictions = {ex.record.image_id: det.predict(ex.scene) for ex in examples}
    ground_truth = {ex.record.image_id: ex.dets for ex in examples}
    return evaluate_ap(predictions, ground_truth, det.space)


# --- pseudo-label generation ----------------------------------------------------


@dataclass
class PseudoLabelSet:
    """Detections for one dataset's images expressed in another space."""

    dataset_id: str
    space_id: str
    detections: dict[str, list[Detection]]
    provenance: dict = field(default_factory=dict)

    def filename(self) -> str:
        return f"{self.dataset_id}__in__{self.space_id}.json"


def generate_pseudo_labels(
    detectors: dict[str, ToyDetector],
    scenes: dict[str, dict[str, SceneSpec]],
    dataset_space: dict[str, str],
    tau: float = 0.5,
    nms_iou: float = 0.5,
) -> dict[tuple[str, str], PseudoLabelSet]:
    """Run every detector on every other dataset: N(N-1) pseudo-label sets."""
    for ds, space_id in dataset_space.items():
        if space_id not in detectors:
            raise KeyError(f"no detector trained for label space {space_id!r}")
    out: dict[tuple[str, str], PseudoLabelSet] = {}
    for ds in sorted(scenes):
        for space_id in sorted(detectors):
            if space_id == dataset_space[ds]:
                continue
            det = detectors[space_id]
            per_image = {}
            for image_id in sorted(scenes[ds]):
                raw = det.predict(scenes[ds][image_id], score_floor=tau)
                per_image[image_id] = nms(filter_by_score(raw, tau), nms_iou)
            out[(ds, space_id)] = PseudoLabelSet(
                ds, space_id, per_image,
                provenance={"detector": det.dataset_id, "tau": tau, "nms_iou": nms_iou},
            )
    return out


@dataclass(frozen=True)
class NoiseModel:
    """Perturbations applied by the oracle pseudo-labeler."""

    sigma_box: float = 0.0
    p_confusion: float = 0.0
    p_drop: float = 0.0
    p_spurious: float = 0.0

    @property
    def is_zero(self) -> bool:
        return (
            self.sigma_box == 0.0
            and self.p_confusion == 0.0
            and self.p_drop == 0.0
            and self.p_spurious == 0.0
        )


def oracle_pseudo_labels(
    scenes: dict[str, SceneSpec],
    taxonomy: TaxonomyMap,
    dataset_id: str,
    space_id: str,
    noise: NoiseModel,
    seed: int,
    tau: float = 0.5,
    nms_iou: float = 0.5,
) -> PseudoLabelSet:
    """Ground truth transported through the taxonomy, then perturbed.

    With all-zero noise the output equals the oracle-mapped ground truth
    at score 0.99. Scores are Beta-distributed with a mean tied to class
    correctness, so thresholding preferentially removes confused labels.
    """
    origin = Origin.pseudo(f"oracle:{space_id}")
    n_classes = len(taxonomy.class_names[space_id])
    per_image: dict[str, list[Detection]] = {}
    for image_id in sorted(scenes):
        scene = scenes[image_id]
        w, h = scene.canvas
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, stable_hash(image_id), stable_hash(space_id)])
        )
        base = transport(scene, taxonomy, space_id, origin=origin)
        dets: list[Detection] = []
        for d in base:
            if noise.p_drop > 0 and rng.uniform() < noise.p_drop:
                continue
            cls = d.class_id
            correct = True
            if noise.p_confusion > 0 and n_classes > 1 and rng.uniform() < noise.p_confusion:
                cls = int((cls + 1 + rng.integers(n_classes - 1)) % n_classes)
                correct = False
            box = d.box
            if noise.sigma_box > 0:
                bw, bh = box.width, box.height
                x0 = box.x_min + rng.normal(0, noise.sigma_box * bw)
                x1 = box.x_max + rng.normal(0, noise.sigma_box * bw)
                y0 = box.y_min + rng.normal(0, noise.sigma_box * bh)
                y1 = box.y_max + rng.normal(0, noise.sigma_box * bh)
                x0, x1 = max(0.0, min(x0, w)), max(0.0, min(x1, w))
                y0, y1 = max(0.0, min(y0, h)), max(0.0, min(y1, h))
                if x0 < x1 and y0 < y1:
                    box = Box(x0, y0, x1, y1).quantized()
            if noise.is_zero:
                score = 0.99
            else:
                score = rng.beta(16, 4) if correct else rng.beta(6, 6)
                score = round9(float(np.clip(score, 0.01, 0.99)))
            dets.append(Detection(box=box, class_id=cls, score=score, origin=origin))
            if noise.p_spurious > 0 and rng.uniform() < noise.p_spurious:
                sw = float(rng.uniform(0.08, 0.3)) * w
                sh = float(rng.uniform(0.08, 0.3)) * h
                sx = float(rng.uniform(0, w - sw))
                sy = float(rng.uniform(0, h - sh))
                dets.append(
                    Detection(
                        box=Box(sx, sy, sx + sw, sy + sh).quantized(),
                        class_id=int(rng.integers(n_classes)),
                        score=round9(float(np.clip(rng.beta(6, 6), 0.01, 0.99))),
                        origin=origin,
                    )
                )
        per_image[image_id] = nms(filter_by_score(dets, tau), nms_iou)
    return PseudoLabelSet(
        dataset_id, space_id, per_image,
        provenance={"detector": f"oracle:{space_id}", "tau": tau, "nms_iou": nms_iou},
    )


# --- detector checkpoints ---------------------------------------------------------


def save_detector(det: ToyDetector, path: str | Path, config_hash: str = "") -> None:
    header = {
        "kind": "toy-detector",
        "dataset_id": det.dataset_id,
        "space": [det.space.space_id, list(det.space.class_names)],
        "feature_model": det.feature_model.to_dict(),
        "config": {
            "iterations": det.config.iterations,
            "learning_rate": det.config.learning_rate,
            "batch_size": det.config.batch_size,
            "hidden_dim": det.config.hidden_dim,
            "anchor_scales": list(det.config.anchor_scales),
            "ema_decay": det.config.ema_decay,
            "strategy": det.config.strategy,
            "fine_tune_fraction": det.config.fine_tune_fraction,
            "score_floor": det.config.score_floor,
            "nms_iou": det.config.nms_iou,
        },
        "config_hash": config_hash,
        "seed": det.seed,
    }
    arrays = {k: p.value for k, p in det.parameters().items()}
    if det.ema is not None:
        for k, v in det.ema.items():
            arrays[f"ema__{k}"] = v
    save_weights(path, header, arrays)


def load_detector(path: str | Path) -> ToyDetector:
    header, arrays = load_weights(path)
    if header.get("kind") != "toy-detector":
        raise ValueError(f"{path}: not a detector checkpoint")
    cfg_doc = header["config"]
    config = DetectorConfig(
        iterations=cfg_doc["iterations"],
        learning_rate=cfg_doc["learning_rate"],
        batch_size=cfg_doc["batch_size"],
        hidden_dim=cfg_doc["hidden_dim"],
        anchor_scales=tuple(cfg_doc["anchor_scales"]),
        ema_decay=cfg_doc["ema_decay"],
        strategy=cfg_doc["strategy"],
        fine_tune_fraction=cfg_doc["fine_tune_fraction"],
        score_floor=cfg_doc["score_floor"],
        nms_iou=cfg_doc["nms_iou"],
    )
    space = LabelSpace(header["space"][0], tuple(header["space"][1]))
    det = ToyDetector(
        header["dataset_id"], space, FeatureModel.from_dict(header["feature_model"]),
        config, header["seed"],
    )
    ema: dict[str, np.ndarray] = {}
    for k, p in det.parameters().items():
        p.value = arrays[k].copy()
    for k in arrays:
        if k.startswith("ema__"):
            ema[k[len("ema__"):]] = arrays[k].copy()
    det.ema = ema or None
    return det
