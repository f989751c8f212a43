"""Synthetic multi-taxonomy detection benchmark with a known mapping oracle.

Scenes are lists of fine-grained objects on a blank canvas. Each dataset
observes the same kind of scenes through its own taxonomy (a surjective
fine -> class grouping) and box convention (separate boxes, pairs merged
into one box, or inflated boxes). The construction-time fine ground truth
is retained, so any dataset's annotations can be transported into any
other space exactly — the oracle against which transfer is verified.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import (
    Box,
    Detection,
    ImageRecord,
    Origin,
    round9,
    write_canonical_json,
)
from .features import FeatureModel
from .labelspace import LabelSpace

SEPARATE = "separate"
MERGE_PAIRS = "merge_pairs"
INFLATE = "inflate"


@dataclass(frozen=True)
class SceneObject:
    fine_class: int
    box: Box
    paired_with: int | None = None  # index of the partner object in the scene


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self):
        w, h = self.canvas
        for i, obj in enumerate(self.objects):
            b = obj.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(f"object {i} outside the {w}x{h} canvas")
            j = obj.paired_with
            if j is not None and self.objects[j].paired_with != i:
                raise ValueError(f"asymmetric pairing between objects {i} and {j}")


@dataclass(frozen=True)
class BoxConvention:
    kind: str
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in (SEPARATE, MERGE_PAIRS, INFLATE):
            raise ValueError(f"unknown box convention {self.kind!r}")


@dataclass(frozen=True)
class TaxonomyMap:
    """Fine classes plus each dataset's grouping and box convention."""

    fine_classes: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...]
    groupings: dict[str, tuple[int, ...]]  # space_id -> (fine idx -> local class)
    conventions: dict[str, BoxConvention]
    class_names: dict[str, tuple[str, ...]]  # space_id -> local class names

    def __post_init__(self):
        n = len(self.fine_classes)
        for space_id, g in self.groupings.items():
            if len(g) != n:
                raise ValueError(f"grouping for {space_id!r} must cover all fine classes")
            names = self.class_names[space_id]
            if set(g) != set(range(len(names))):
                raise ValueError(f"grouping for {space_id!r} is not surjective onto its classes")
            if self.conventions[space_id].kind == MERGE_PAIRS:
                for a, b in self.pairs:
                    if g[a] != g[b]:
                        raise ValueError(
                            f"{space_id!r} merges pairs but maps pair ({a},{b}) to distinct classes"
                        )

    def label_space(self, space_id: str) -> LabelSpace:
        return LabelSpace(space_id, self.class_names[space_id])


def transport(
    scene: SceneSpec, taxonomy: TaxonomyMap, space_id: str, score: float = 1.0,
    origin: Origin | None = None,
) -> list[Detection]:
    """Express a scene's ground truth in one dataset's taxonomy and convention."""
    grouping = taxonomy.groupings[space_id]
    conv = taxonomy.conventions[space_id]
    origin = origin if origin is not None else Origin.ground_truth()
    w, h = scene.canvas
    out: list[Detection] = []
    emitted_pair = set()
    for i, obj in enumerate(scene.objects):
        local = grouping[obj.fine_class]
        if conv.kind == MERGE_PAIRS and obj.paired_with is not None:
            if i in emitted_pair:
                continue
            j = obj.paired_with
            emitted_pair.update((i, j))
            box = obj.box.union_with(scene.objects[j].box)
        elif conv.kind == INFLATE:
            cx, cy = obj.box.center
            bw, bh = obj.box.width * conv.factor, obj.box.height * conv.factor
            box = Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clipped(w, h)
        else:
            box = obj.box
        out.append(Detection(box=box.quantized(), class_id=local, score=score, origin=origin))
    return out


# --- benchmark generation ----------------------------------------------------


@dataclass(frozen=True)
class DatasetDecl:
    dataset_id: str
    n_images: int
    granularity: str  # key into the grouping presets: coarse | mid | fine
    convention: BoxConvention


@dataclass(frozen=True)
class BenchConfig:
    datasets: tuple[DatasetDecl, ...]
    n_fine: int = 12
    pairs: tuple[tuple[int, int], ...] = ((0, 1), (6, 7))
    canvas: tuple[int, int] = (256, 256)
    objects_per_image: tuple[int, int] = (2, 5)
    object_size: tuple[float, float] = (24.0, 64.0)
    eval_fraction: float = 0.2
    feature_dim: int = 16
    feature_stride: float = 8.0
    feature_noise: float = 0.05


def granularity_preset(n_images: int = 60, feature_noise: float = 0.05) -> BenchConfig:
    """Three datasets whose class counts shrink 12 -> 6 -> 3 up the hierarchy."""
    return BenchConfig(
        datasets=(
            DatasetDecl("coarse", n_images, "coarse", BoxConvention(MERGE_PAIRS)),
            DatasetDecl("mid", n_images, "mid", BoxConvention(INFLATE, 1.1)),
            DatasetDecl("fine", n_images, "fine", BoxConvention(SEPARATE)),
        ),
        feature_noise=feature_noise,
    )


def size_disparity_preset(
    counts: tuple[int, int, int, int] = (100, 60, 2000, 4000), feature_noise: float = 0.05
) -> BenchConfig:
    """Two small and two large datasets sharing class semantics; boxes differ."""
    return BenchConfig(
        datasets=(
            DatasetDecl("small_a", counts[0], "mid", BoxConvention(SEPARATE)),
            DatasetDecl("small_b", counts[1], "mid", BoxConvention(SEPARATE)),
            DatasetDecl("large_a", counts[2], "mid", BoxConvention(INFLATE, 1.15)),
            DatasetDecl("large_b", counts[3], "mid", BoxConvention(INFLATE, 1.3)),
        ),
        feature_noise=feature_noise,
    )


def _grouping(kind: str, n_fine: int) -> tuple[int, ...]:
    if kind == "fine":
        return tuple(range(n_fine))
    if kind == "mid":
        return tuple(i // 2 for i in range(n_fine))
    if kind == "coarse":
        return tuple(i // 4 for i in range(n_fine))
    raise ValueError(f"unknown granularity {kind!r}")


def _class_names(kind: str, n_fine: int) -> tuple[str, ...]:
    g = _grouping(kind, n_fine)
    return tuple(f"{kind}_{c:02d}" for c in range(max(g) + 1))


@dataclass
class BenchmarkData:
    config: BenchConfig
    seed: int
    taxonomy: TaxonomyMap
    feature_model: FeatureModel
    corpora: dict[str, list[ImageRecord]]
    scenes: dict[str, dict[str, SceneSpec]]
    splits: dict[str, dict[str, list[str]]]
    spaces: dict[str, LabelSpace] = field(init=False)

    def __post_init__(self):
        self.spaces = {sid: self.taxonomy.label_space(sid) for sid in self.taxonomy.groupings}

    @property
    def dataset_ids(self) -> list[str]:
        return [d.dataset_id for d in self.config.datasets]

    def scene_of(self, image_id: str) -> SceneSpec:
        dataset_id = image_id.split("/", 1)[0]
        return self.scenes[dataset_id][image_id]

    def oracle_in_space(self, dataset_id: str, space_id: str) -> dict[str, list[Detection]]:
        """Oracle transport of a dataset's images into a space, keyed by image id."""
        return {
            image_id: transport(scene, self.taxonomy, space_id)
            for image_id, scene in sorted(self.scenes[dataset_id].items())
        }


def _sample_scene(cfg: BenchConfig, rng: np.random.Generator, scene_seed: int) -> SceneSpec:
    w, h = cfg.canvas
    lo, hi = cfg.object_size
    pair_of = {a: b for a, b in cfg.pairs}
    paired_fine = set(pair_of) | set(pair_of.values())
    singles = [f for f in range(cfg.n_fine) if f not in paired_fine]
    entities = [("single", f) for f in singles] + [("pair", a) for a, _ in cfg.pairs]

    objects: list[SceneObject] = []
    boxes: list[Box] = []

    def overlaps(candidate: Box) -> bool:
        from .annotations import iou

        return any(iou(candidate, b) > 0.3 for b in boxes)

    n_entities = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    for _ in range(n_entities):
        kind, fine = entities[rng.integers(len(entities))]
        for _attempt in range(12):
            bw = float(rng.uniform(lo, hi))
            bh = float(rng.uniform(lo, hi))
            if kind == "pair":
                # leave head-room above the base object for its partner
                top = 0.75 * bh
                if top + bh >= h:
                    continue
                x = float(rng.uniform(0, w - bw))
                y = float(rng.uniform(top, h - bh))
            else:
                x = float(rng.uniform(0, w - bw))
                y = float(rng.uniform(0, h - bh))
            base = Box(round9(x), round9(y), round9(x + bw), round9(y + bh))
            if not overlaps(base):
                break
        else:
            continue
        if kind == "single":
            objects.append(SceneObject(fine, base))
            boxes.append(base)
        else:
            partner_fine = pair_of[fine]
            pw, ph = 0.55 * bw, 0.7 * bh
            px = base.center[0] - pw / 2 + float(rng.uniform(-0.15, 0.15)) * bw
            py_max = base.y_min + 0.35 * bh
            partner = Box(
                round9(max(0.0, px)),
                round9(max(0.0, py_max - ph)),
                round9(min(float(w), max(0.0, px) + pw)),
                round9(py_max),
            )
            i = len(objects)
            objects.append(SceneObject(fine, base, paired_with=i + 1))
            objects.append(SceneObject(partner_fine, partner, paired_with=i))
            boxes.append(base)
    if not objects:
        # a scene must contain at least one object; place one deterministically
        side = (lo + hi) / 2
        f = singles[0] if singles else 0
        b = Box(round9((w - side) / 2), round9((h - side) / 2),
                round9((w + side) / 2), round9((h + side) / 2))
        objects.append(SceneObject(f, b))
    return SceneSpec(canvas=cfg.canvas, objects=tuple(objects), seed=scene_seed)


def generate_benchmark(cfg: BenchConfig, seed: int) -> BenchmarkData:
    """Generate corpora, taxonomy, scenes, and seeded train/eval splits."""
    groupings, conventions, class_names = {}, {}, {}
    for decl in cfg.datasets:
        sid = decl.dataset_id
        groupings[sid] = _grouping(decl.granularity, cfg.n_fine)
        conventions[sid] = decl.convention
        class_names[sid] = _class_names(decl.granularity, cfg.n_fine)
    taxonomy = TaxonomyMap(
        fine_classes=tuple(f"fine_{i:02d}" for i in range(cfg.n_fine)),
        pairs=cfg.pairs,
        groupings=groupings,
        conventions=conventions,
        class_names=class_names,
    )
    feature_model = FeatureModel(
        seed=seed,
        num_classes=cfg.n_fine,
        feature_dim=cfg.feature_dim,
        stride=cfg.feature_stride,
        noise_sigma=cfg.feature_noise,
    )

    corpora: dict[str, list[ImageRecord]] = {}
    scenes: dict[str, dict[str, SceneSpec]] = {}
    splits: dict[str, dict[str, list[str]]] = {}
    for d_idx, decl in enumerate(cfg.datasets):
        ds = decl.dataset_id
        corpora[ds] = []
        scenes[ds] = {}
        for i in range(decl.n_images):
            rng = np.random.default_rng(np.random.SeedSequence([seed, d_idx, i]))
            scene_seed = int(rng.integers(0, 2**31 - 1))
            scene = _sample_scene(cfg, rng, scene_seed)
            image_id = f"{ds}/{i:05d}"
            scenes[ds][image_id] = scene
            gt = transport(scene, taxonomy, ds)
            corpora[ds].append(
                ImageRecord(image_id, ds, cfg.canvas, annotations={ds: gt})
            )
        split_rng = np.random.default_rng(np.random.SeedSequence([seed, d_idx, 0xE7A1]))
        ids = [r.image_id for r in corpora[ds]]
        n_eval = int(round(cfg.eval_fraction * len(ids)))
        eval_ids = sorted(split_rng.choice(ids, size=n_eval, replace=False).tolist())
        train_ids = [i for i in ids if i not in set(eval_ids)]
        splits[ds] = {"train": train_ids, "eval": eval_ids}

    return BenchmarkData(
        config=cfg,
        seed=seed,
        taxonomy=taxonomy,
        feature_model=feature_model,
        corpora=corpora,
        scenes=scenes,
        splits=splits,
    )


# --- persistence --------------------------------------------------------------


def save_benchmark(bench: BenchmarkData, out_dir: str | Path) -> list[str]:
    """Write corpora + taxonomy.json + scenes.json + splits.json; returns filenames."""
    from .annotations import save_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    spaces_doc = {sid: list(sp.class_names) for sid, sp in bench.spaces.items()}
    for ds in bench.dataset_ids:
        name = f"corpus_{ds.replace('/', '_')}.json"
        save_corpus(bench.corpora[ds], {ds: spaces_doc[ds]}, out / name)
        written.append(name)

    tax = bench.taxonomy
    taxonomy_doc = {
        "fine_classes": list(tax.fine_classes),
        "pairs": [list(p) for p in tax.pairs],
        "groupings": {k: list(v) for k, v in tax.groupings.items()},
        "conventions": {
            k: {"kind": c.kind, "factor": c.factor} for k, c in tax.conventions.items()
        },
        "class_names": {k: list(v) for k, v in tax.class_names.items()},
        "feature_model": bench.feature_model.to_dict(),
        "datasets": [
            {
                "dataset_id": d.dataset_id,
                "n_images": d.n_images,
                "granularity": d.granularity,
            }
            for d in bench.config.datasets
        ],
        "canvas": list(bench.config.canvas),
        "seed": bench.seed,
    }
    write_canonical_json(taxonomy_doc, out / "taxonomy.json")
    written.append("taxonomy.json")

    scenes_doc = {}
    for ds, per_image in bench.scenes.items():
        scenes_doc[ds] = {
            image_id: {
                "canvas": list(scene.canvas),
                "seed": scene.seed,
                "objects": [
                    {
                        "fine_class": o.fine_class,
                        "box": [o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max],
                        "paired_with": o.paired_with,
                    }
                    for o in scene.objects
                ],
            }
            for image_id, scene in per_image.items()
        }
    write_canonical_json(scenes_doc, out / "scenes.json")
    written.append("scenes.json")

    write_canonical_json(bench.splits, out / "splits.json")
    written.append("splits.json")
    return written


def load_benchmark(out_dir: str | Path) -> BenchmarkData:
    from .annotations import load_corpus

    out = Path(out_dir)
    tax_doc = json.loads((out / "taxonomy.json").read_text())
    taxonomy = TaxonomyMap(
        fine_classes=tuple(tax_doc["fine_classes"]),
        pairs=tuple(tuple(p) for p in tax_doc["pairs"]),
        groupings={k: tuple(v) for k, v in tax_doc["groupings"].items()},
        conventions={
            k: BoxConvention(c["kind"], c["factor"]) for k, c in tax_doc["conventions"].items()
        },
        class_names={k: tuple(v) for k, v in tax_doc["class_names"].items()},
    )
    feature_model = FeatureModel.from_dict(tax_doc["feature_model"])
    canvas = tuple(tax_doc["canvas"])

    scenes_doc = json.loads((out / "scenes.json").read_text())
    scenes: dict[str, dict[str, SceneSpec]] = {}
    for ds in sorted(scenes_doc):
        scenes[ds] = {}
        for image_id in sorted(scenes_doc[ds]):
            s = scenes_doc[ds][image_id]
            scenes[ds][image_id] = SceneSpec(
                canvas=tuple(s["canvas"]),
                objects=tuple(
                    SceneObject(
                        fine_class=o["fine_class"],
                        box=Box(*o["box"]),
                        paired_with=o["paired_with"],
                    )
                    for o in s["objects"]
                ),
                seed=s["seed"],
            )

    splits = json.loads((out / "splits.json").read_text())

    decls = []
    corpora = {}
    for d in tax_doc["datasets"]:
        ds = d["dataset_id"]
        records, _ = load_corpus(out / f"corpus_{ds.replace('/', '_')}.json")
        records.sort(key=lambda r: r.image_id)
        corpora[ds] = records
        decls.append(
            DatasetDecl(ds, d["n_images"], d["granularity"], taxonomy.conventions[ds])
        )

    cfg = BenchConfig(
        datasets=tuple(decls),
        n_fine=len(taxonomy.fine_classes),
        pairs=taxonomy.pairs,
        canvas=canvas,
        feature_dim=feature_model.feature_dim,
        feature_stride=feature_model.stride,
        feature_noise=feature_model.noise_sigma,
    )
    return BenchmarkData(
        config=cfg,
        seed=tax_doc["seed"],
        taxonomy=taxonomy,
        feature_model=feature_model,
        corpora=corpora,
        scenes=scenes,
        splits=splits,
    )


# --- evaluation metrics --------------------------------------------------------

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ApReport:
    per_class_ap50: dict[int, float]
    map50: float
    map5095: float
    n_ground_truth: dict[int, int]
    n_predictions: int

    def scaled(self) -> dict[str, float]:
        """Percentages, the convention used by detection papers."""
        return {"mAP50": 100 * self.map50, "mAP": 100 * self.map5095}


def _class_ap(
    preds: list[tuple[str, float, Box]], gts: dict[str, list[Box]], thr: float
) -> float:
    """101-point interpolated AP for one class at one IoU threshold."""
    from .annotations import iou

    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], preds[i][0], preds[i][2].x_min))
    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, _score, box = preds[i]
        candidates = gts.get(image_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(candidates):
            if matched[image_id][j]:
                continue
            v = iou(box, g)
            if v >= thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[image_id][best] = True
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # precision envelope: best precision achievable at recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    for i in idx:
        ap += precision[i] if i < len(precision) else 0.0
    return ap / len(RECALL_POINTS)


def evaluate_ap(
    predictions: dict[str, list[Detection]],
    ground_truth: dict[str, list[Detection]],
    space: LabelSpace,
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> ApReport:
    """COCO-style AP: 101 recall points, classes with no ground truth excluded."""
    by_class_preds: dict[int, list[tuple[str, float, Box]]] = {c: [] for c in range(len(space))}
    by_class_gts: dict[int, dict[str, list[Box]]] = {c: {} for c in range(len(space))}
    n_preds = 0
    for image_id in sorted(ground_truth):
        for det in ground_truth[image_id]:
            by_class_gts[det.class_id].setdefault(image_id, []).append(det.box)
    for image_id in sorted(predictions):
        if image_id not in ground_truth:
            raise KeyError(f"prediction for image {image_id!r} absent from ground truth")
        for det in predictions[image_id]:
            by_class_preds[det.class_id].append((image_id, det.score, det.box))
            n_preds += 1

    per_class_ap50: dict[int, float] = {}
    n_gt = {c: sum(len(v) for v in by_class_gts[c].values()) for c in by_class_gts}
    all_aps: list[float] = []
    for c in range(len(space)):
        if n_gt[c] == 0:
            continue
        ap50 = _class_ap(by_class_preds[c], by_class_gts[c], 0.5)
        per_class_ap50[c] = ap50
        for thr in iou_thresholds:
            all_aps.append(
                ap50 if thr == 0.5 else _class_ap(by_class_preds[c], by_class_gts[c], thr)
            )
    map50 = float(np.mean(list(per_class_ap50.values()))) if per_class_ap50 else 0.0
    map5095 = float(np.mean(all_aps)) if all_aps else 0.0
    return ApReport(per_class_ap50, map50, map5095, n_gt, n_preds)


@dataclass(frozen=True)
class RecoveryReport:
    accuracy: float
    mean_iou: float
    n_oracle: int
    n_matched: int
    confusion: dict[tuple[int, int], int]  # (oracle class, predicted class) -> count


def mapping_recovery(
    transferred: dict[str, list[Detection]], oracle: dict[str, list[Detection]]
) -> RecoveryReport:
    """Greedy class-agnostic IoU >= 0.5 matching against the oracle transport."""
    from .annotations import iou

    n_oracle = sum(len(v) for v in oracle.values())
    n_matched = 0
    n_correct = 0
    iou_sum = 0.0
    confusion: dict[tuple[int, int], int] = {}
    for image_id in sorted(oracle):
        gts = oracle[image_id]
        preds = transferred.get(image_id, [])
        pairs = []
        for pi, p in enumerate(preds):
            for gi, g in enumerate(gts):
                v = iou(p.box, g.box)
                if v >= 0.5:
                    pairs.append((v, gi, pi))
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_p, used_g = set(), set()
        for v, gi, pi in pairs:
            if gi in used_g or pi in used_p:
                continue
            used_g.add(gi)
            used_p.add(pi)
            n_matched += 1
            iou_sum += v
            key = (gts[gi].class_id, preds[pi].class_id)
            confusion[key] = confusion.get(key, 0) + 1
            if key[0] == key[1]:
                n_correct += 1
    return RecoveryReport(
        accuracy=n_correct / n_oracle if n_oracle else 0.0,
        mean_iou=iou_sum / n_matched if n_matched else 0.0,
        n_oracle=n_oracle,
        n_matched=n_matched,
        confusion=confusion,
    )
