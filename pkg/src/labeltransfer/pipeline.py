"""Stage orchestration: each stage validates its inputs, writes only under
the output directory, and records a manifest (config hash, input digests,
seed) so any artifact is reproducible and re-runs are byte-identical."""

from __future__ import annotations

import dataclasses
import hashlib
import sys
from pathlib import Path

import numpy as np

from .annotations import Detection, ImageRecord, load_corpus, save_corpus, write_canonical_json
from .benchmark import (
    BenchmarkData,
    evaluate_ap,
    generate_benchmark,
    load_benchmark,
    mapping_recovery,
    save_benchmark,
)
from .config import RunConfig, config_to_dict
from .detectors import (
    DetectorExample,
    PseudoLabelSet,
    ToyDetector,
    evaluate_detector,
    generate_pseudo_labels,
    load_detector,
    oracle_pseudo_labels,
    save_detector,
    train_toy_detector,
)
from .fusion import mode_variants
from .labelspace import GlobalIndex, mapping_table
from .model import (
    LatModel,
    LatTrainInputs,
    collect_fusion_traces,
    load_checkpoint,
    save_checkpoint,
    train_lat,
    transfer_annotations,
)

METHODS = ("baseline", "pseudo_label", "lat")
STRATEGY_ABLATION = ("fifty_fifty", "mixed", "fine_tune")


class MissingInputError(FileNotFoundError):
    """A stage's required input artifact is absent."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(stage_dir: Path, stage: str, cfg: RunConfig,
                    inputs: list[Path], outputs: list[str]) -> None:
    root = Path(cfg.output_dir)
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "inputs": {
            str(p.relative_to(root)) if p.is_relative_to(root) else str(p): _sha256(p)
            for p in sorted(inputs)
        },
        "outputs": sorted(outputs),
    }
    write_canonical_json(manifest, stage_dir / "manifest.json")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {path}; run the {producer!r} stage first")
    return path


def _bench_dir(cfg: RunConfig) -> Path:
    if cfg.benchmark_dir is not None:
        return Path(cfg.benchmark_dir)
    return Path(cfg.output_dir) / "bench"


def _load_bench(cfg: RunConfig) -> tuple[BenchmarkData, list[Path]]:
    bdir = _bench_dir(cfg)
    _require(bdir / "taxonomy.json", "gen-bench")
    bench = load_benchmark(bdir)
    files = sorted(p for p in bdir.iterdir() if p.suffix == ".json" and p.name != "manifest.json")
    return bench, files


def dataset_space_map(bench: BenchmarkData) -> dict[str, str]:
    """Datasets are named after their label space in the synthetic presets."""
    return {ds: ds for ds in bench.dataset_ids}


def global_index(bench: BenchmarkData) -> GlobalIndex:
    return GlobalIndex(tuple(bench.spaces[ds] for ds in bench.dataset_ids))


def _split_records(bench: BenchmarkData, ds: str, split: str) -> list[ImageRecord]:
    wanted = set(bench.splits[ds][split])
    return [r for r in bench.corpora[ds] if r.image_id in wanted]


# --- stages -------------------------------------------------------------------


def stage_gen_bench(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    bench = generate_benchmark(cfg.bench_config(), cfg.seed)
    written = save_benchmark(bench, out)
    index = global_index(bench)
    (out / "global_index.tsv").write_text(mapping_table(index))
    written.append("global_index.tsv")
    _write_manifest(out, "gen-bench", cfg, [], written)
    return out


def stage_train_detectors(cfg: RunConfig) -> Path:
    bench, bench_files = _load_bench(cfg)
    out = Path(cfg.output_dir) / "detectors"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in bench.dataset_ids:
        examples = [
            DetectorExample.from_ground_truth(r, bench.scenes[ds][r.image_id], ds)
            for r in _split_records(bench, ds, "train")
        ]
        det = train_toy_detector(
            examples, ds, bench.spaces[ds], bench.feature_model, cfg.detector_train,
            seed=cfg.seed,
        )
        name = f"detector_{ds}.ckpt"
        save_detector(det, out / name, config_hash=cfg.config_hash())
        written.append(name)
        print(f"[train-detectors] {ds}: final loss {det.train_log[-1]:.4f}", flush=True)
    _write_manifest(out, "train-detectors", cfg, bench_files, written)
    return out


def stage_pseudo_label(cfg: RunConfig) -> Path:
    bench, bench_files = _load_bench(cfg)
    out = Path(cfg.output_dir) / "pseudo"
    out.mkdir(parents=True, exist_ok=True)
    ds_space = dataset_space_map(bench)
    inputs = list(bench_files)
    sets: list[PseudoLabelSet] = []
    if cfg.pseudo_mode == "detector":
        det_dir = Path(cfg.output_dir) / "detectors"
        detectors: dict[str, ToyDetector] = {}
        for ds in bench.dataset_ids:
            path = _require(det_dir / f"detector_{ds}.ckpt", "train-detectors")
            detectors[ds] = load_detector(path)
            inputs.append(path)
        generated = generate_pseudo_labels(
            detectors, bench.scenes, ds_space, cfg.tau, cfg.nms_iou
        )
        sets = [generated[k] for k in sorted(generated)]
    else:
        for ds in bench.dataset_ids:
            for space in bench.dataset_ids:
                if space == ds:
                    continue
                sets.append(
                    oracle_pseudo_labels(
                        bench.scenes[ds], bench.taxonomy, ds, space, cfg.noise,
                        seed=cfg.seed, tau=cfg.tau, nms_iou=cfg.nms_iou,
                    )
                )
    written = []
    for ps in sets:
        records = [
            ImageRecord(r.image_id, r.dataset_id, r.size,
                        {ps.space_id: ps.detections.get(r.image_id, [])})
            for r in bench.corpora[ps.dataset_id]
        ]
        save_corpus(records, {ps.space_id: bench.spaces[ps.space_id].class_names}, out / ps.filename())
        written.append(ps.filename())
    _write_manifest(out, "pseudo-label", cfg, inputs, written)
    return out


def load_pseudo_sets(cfg: RunConfig, bench: BenchmarkData) -> tuple[
    dict[tuple[str, str], dict[str, list[Detection]]], list[Path]
]:
    pdir = Path(cfg.output_dir) / "pseudo"
    pseudo: dict[tuple[str, str], dict[str, list[Detection]]] = {}
    files = []
    for ds in bench.dataset_ids:
        for space in bench.dataset_ids:
            if space == ds:
                continue
            path = _require(pdir / f"{ds}__in__{space}.json", "pseudo-label")
            files.append(path)
            records, _ = load_corpus(path, {space: bench.spaces[space].class_names})
            pseudo[(ds, space)] = {r.image_id: r.annotations.get(space, []) for r in records}
    return pseudo, files


def _lat_inputs(cfg: RunConfig, bench: BenchmarkData, pseudo, split: str | None) -> LatTrainInputs:
    records = {
        ds: (_split_records(bench, ds, split) if split else list(bench.corpora[ds]))
        for ds in bench.dataset_ids
    }
    return LatTrainInputs(
        index=global_index(bench),
        feature_model=bench.feature_model,
        records=records,
        scenes=bench.scenes,
        pseudo=pseudo,
        dataset_space=dataset_space_map(bench),
        target_dataset=cfg.target_space,
        aug=cfg.aug,
    )


def stage_train_lat(cfg: RunConfig) -> Path:
    bench, bench_files = _load_bench(cfg)
    pseudo, pseudo_files = load_pseudo_sets(cfg, bench)
    out = Path(cfg.output_dir) / "lat"
    out.mkdir(parents=True, exist_ok=True)
    inputs = _lat_inputs(cfg, bench, pseudo, split="train")
    model = train_lat(inputs, cfg.sff, dataclasses.replace(cfg.lat_train, seed=cfg.seed))
    save_checkpoint(model, out / "lat_model.ckpt", config_hash=cfg.config_hash(), seed=cfg.seed)
    write_canonical_json({"loss": model.train_log}, out / "train_log.json")
    print(f"[train-lat] final loss {model.train_log[-1]:.4f}", flush=True)
    _write_manifest(out, "train-lat", cfg, bench_files + pseudo_files, ["lat_model.ckpt", "train_log.json"])
    return out


def stage_transfer(cfg: RunConfig, dump_attention: bool = False) -> Path:
    bench, bench_files = _load_bench(cfg)
    pseudo, pseudo_files = load_pseudo_sets(cfg, bench)
    ckpt = _require(Path(cfg.output_dir) / "lat" / "lat_model.ckpt", "train-lat")
    model = load_checkpoint(ckpt)
    out = Path(cfg.output_dir) / "transfer"
    out.mkdir(parents=True, exist_ok=True)
    inputs = _lat_inputs(cfg, bench, pseudo, split=None)
    transferred = transfer_annotations(
        model, inputs, cfg.target_space, tau=cfg.tau, nms_iou=cfg.nms_iou
    )
    written = []
    target_names = {cfg.target_space: bench.spaces[cfg.target_space].class_names}
    for ds in bench.dataset_ids:
        name = f"transferred_{ds}.json"
        save_corpus(transferred[ds], target_names, out / name)
        written.append(name)
    if dump_attention:
        traces = collect_fusion_traces(model, inputs)
        write_canonical_json(traces, out / "attention_dump.json")
        written.append("attention_dump.json")
    _write_manifest(out, "transfer", cfg, bench_files + pseudo_files + [ckpt], written)
    return out


def load_transferred(cfg: RunConfig, bench: BenchmarkData) -> tuple[
    dict[str, list[ImageRecord]], list[Path]
]:
    tdir = Path(cfg.output_dir) / "transfer"
    out = {}
    files = []
    names = {cfg.target_space: bench.spaces[cfg.target_space].class_names}
    for ds in bench.dataset_ids:
        path = _require(tdir / f"transferred_{ds}.json", "transfer")
        files.append(path)
        records, _ = load_corpus(path, names)
        records.sort(key=lambda r: r.image_id)
        out[ds] = records
    return out, files


def downstream_examples(
    cfg: RunConfig,
    bench: BenchmarkData,
    method: str,
    transferred: dict[str, list[ImageRecord]] | None,
    pseudo: dict[tuple[str, str], dict[str, list[Detection]]] | None,
) -> list[DetectorExample]:
    """Training set for one method: target ground truth, plus source-dataset
    annotations in the target space (raw pseudo-labels or transferred)."""
    target = cfg.target_space
    examples = [
        DetectorExample.from_ground_truth(r, bench.scenes[target][r.image_id], target)
        for r in _split_records(bench, target, "train")
    ]
    if method == "baseline":
        return examples
    for ds in bench.dataset_ids:
        if ds == target:
            continue
        train_ids = set(bench.splits[ds]["train"])
        if method == "pseudo_label":
            per_image = pseudo[(ds, target)]
            for rec in bench.corpora[ds]:
                if rec.image_id not in train_ids:
                    continue
                dets = per_image.get(rec.image_id, [])
                weights = np.array([d.score for d in dets])
                examples.append(
                    DetectorExample(rec, bench.scenes[ds][rec.image_id], dets, weights, ds)
                )
        elif method == "lat":
            for rec in transferred[ds]:
                if rec.image_id not in train_ids:
                    continue
                examples.append(
                    DetectorExample.from_weighted(rec, bench.scenes[ds][rec.image_id], target, ds)
                )
        else:
            raise ValueError(f"unknown method {method!r}")
    return examples


def _downstream_map(cfg: RunConfig, bench: BenchmarkData, examples, seed: int,
                    config=None) -> tuple[float, float]:
    """Train a downstream detector and report (mAP, mAP50) on the target eval split."""
    target = cfg.target_space
    det = train_toy_detector(
        examples, target, bench.spaces[target], bench.feature_model,
        config if config is not None else cfg.downstream_train,
        seed=seed, target_domain=target,
    )
    eval_examples = [
        DetectorExample.from_ground_truth(r, bench.scenes[target][r.image_id], target)
        for r in _split_records(bench, target, "eval")
    ]
    report = evaluate_detector(det, eval_examples)
    return report.map5095, report.map50


def stage_train_downstream(cfg: RunConfig) -> Path:
    bench, bench_files = _load_bench(cfg)
    pseudo, pseudo_files = load_pseudo_sets(cfg, bench)
    transferred, transfer_files = load_transferred(cfg, bench)
    out = Path(cfg.output_dir) / "downstream"
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for method in METHODS:
        examples = downstream_examples(cfg, bench, method, transferred, pseudo)
        m, m50 = _downstream_map(cfg, bench, examples, seed=cfg.seed)
        results[method] = {"mAP": 100 * m, "mAP50": 100 * m50, "n_train_images": len(examples)}
        print(f"[train-downstream] {method}: mAP {100 * m:.2f}  mAP50 {100 * m50:.2f}", flush=True)
    doc = {"target": cfg.target_space, "methods": results}
    write_canonical_json(doc, out / "report.json")
    (out / "report.txt").write_text(_method_table(cfg.target_space, results))
    _write_manifest(
        out, "train-downstream", cfg,
        bench_files + pseudo_files + transfer_files, ["report.json", "report.txt"],
    )
    return out


def _method_table(target: str, results: dict) -> str:
    lines = [
        f"Downstream AP on target dataset {target!r} (x100)",
        f"{'method':<14} {'mAP':>8} {'mAP50':>8}",
    ]
    for method in METHODS:
        if method in results:
            r = results[method]
            lines.append(f"{method:<14} {r['mAP']:>8.2f} {r['mAP50']:>8.2f}")
    return "\n".join(lines) + "\n"


def stage_evaluate(cfg: RunConfig) -> Path:
    bench, bench_files = _load_bench(cfg)
    transferred, transfer_files = load_transferred(cfg, bench)
    out = Path(cfg.output_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    per_dataset = {}
    total_correct = 0
    total_oracle = 0
    iou_sum = 0.0
    n_matched = 0
    for ds in bench.dataset_ids:
        oracle = bench.oracle_in_space(ds, cfg.target_space)
        preds = {r.image_id: r.annotations.get(cfg.target_space, []) for r in transferred[ds]}
        rep = mapping_recovery(preds, oracle)
        per_dataset[ds] = {
            "accuracy": rep.accuracy,
            "mean_iou": rep.mean_iou,
            "n_oracle": rep.n_oracle,
            "n_matched": rep.n_matched,
        }
        total_correct += sum(v for (a, b), v in rep.confusion.items() if a == b)
        total_oracle += rep.n_oracle
        iou_sum += rep.mean_iou * rep.n_matched
        n_matched += rep.n_matched
    overall = {
        "accuracy": total_correct / total_oracle if total_oracle else 0.0,
        "mean_iou": iou_sum / n_matched if n_matched else 0.0,
        "n_oracle": total_oracle,
        "n_matched": n_matched,
    }
    doc = {"target": cfg.target_space, "per_dataset": per_dataset, "overall": overall}
    downstream_report = Path(cfg.output_dir) / "downstream" / "report.json"
    inputs = bench_files + transfer_files
    if downstream_report.exists():
        import json

        doc["downstream"] = json.loads(downstream_report.read_text())
        inputs.append(downstream_report)
    write_canonical_json(doc, out / "report.json")
    lines = [
        f"Mapping recovery into {cfg.target_space!r}",
        f"{'dataset':<12} {'accuracy':>9} {'mean IoU':>9} {'oracle':>7} {'matched':>8}",
    ]
    for ds, r in per_dataset.items():
        lines.append(
            f"{ds:<12} {r['accuracy']:>9.4f} {r['mean_iou']:>9.4f} "
            f"{r['n_oracle']:>7d} {r['n_matched']:>8d}"
        )
    lines.append(
        f"{'overall':<12} {overall['accuracy']:>9.4f} {overall['mean_iou']:>9.4f} "
        f"{overall['n_oracle']:>7d} {overall['n_matched']:>8d}"
    )
    text = "\n".join(lines) + "\n"
    if "downstream" in doc:
        text += "\n" + _method_table(cfg.target_space, doc["downstream"]["methods"])
    (out / "report.txt").write_text(text)
    print(text, flush=True)
    _write_manifest(out, "evaluate", cfg, inputs, ["report.json", "report.txt"])
    return out


def stage_ablate_sff(cfg: RunConfig) -> Path:
    """Train + transfer + downstream under the four attenuation variants."""
    bench, bench_files = _load_bench(cfg)
    pseudo, pseudo_files = load_pseudo_sets(cfg, bench)
    out = Path(cfg.output_dir) / "ablate_sff"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode, t_rule in mode_variants():
        sff = dataclasses.replace(cfg.sff, mode=mode, t_rule=t_rule)
        train_inputs = _lat_inputs(cfg, bench, pseudo, split="train")
        model = train_lat(train_inputs, sff, dataclasses.replace(cfg.lat_train, seed=cfg.seed))
        all_inputs = _lat_inputs(cfg, bench, pseudo, split=None)
        transferred = transfer_annotations(
            model, all_inputs, cfg.target_space, tau=cfg.tau, nms_iou=cfg.nms_iou
        )
        examples = downstream_examples(cfg, bench, "lat", transferred, pseudo)
        m, m50 = _downstream_map(cfg, bench, examples, seed=cfg.seed)
        rows.append({"mode": mode, "t_rule": t_rule, "mAP": 100 * m, "mAP50": 100 * m50})
        print(f"[ablate-sff] {mode}@{t_rule}: mAP {100 * m:.2f}", flush=True)
    doc = {"target": cfg.target_space, "variants": rows}
    write_canonical_json(doc, out / "report.json")
    lines = [
        f"Attenuation ablation, downstream AP on {cfg.target_space!r} (x100)",
        f"{'mode':<10} {'threshold':<12} {'mAP':>8} {'mAP50':>8}",
    ]
    for r in rows:
        lines.append(f"{r['mode']:<10} {r['t_rule']:<12} {r['mAP']:>8.2f} {r['mAP50']:>8.2f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "ablate-sff", cfg, bench_files + pseudo_files, ["report.json", "report.txt"])
    return out


def stage_ablate_strategy(cfg: RunConfig) -> Path:
    """Downstream batch-composition ablation on the transferred annotations."""
    bench, bench_files = _load_bench(cfg)
    pseudo, pseudo_files = load_pseudo_sets(cfg, bench)
    transferred, transfer_files = load_transferred(cfg, bench)
    out = Path(cfg.output_dir) / "ablate_strategy"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    examples = downstream_examples(cfg, bench, "lat", transferred, pseudo)
    for strategy in STRATEGY_ABLATION:
        config = dataclasses.replace(cfg.downstream_train, strategy=strategy)
        m, m50 = _downstream_map(cfg, bench, examples, seed=cfg.seed, config=config)
        rows.append({"strategy": strategy, "mAP": 100 * m, "mAP50": 100 * m50})
        print(f"[ablate-strategy] {strategy}: mAP {100 * m:.2f}", flush=True)
    doc = {"target": cfg.target_space, "strategies": rows}
    write_canonical_json(doc, out / "report.json")
    lines = [
        f"Batch-strategy ablation, downstream AP on {cfg.target_space!r} (x100)",
        f"{'strategy':<14} {'mAP':>8} {'mAP50':>8}",
    ]
    for r in rows:
        lines.append(f"{r['strategy']:<14} {r['mAP']:>8.2f} {r['mAP50']:>8.2f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out, "ablate-strategy", cfg,
        bench_files + pseudo_files + transfer_files, ["report.json", "report.txt"],
    )
    return out


def run_all(cfg: RunConfig, dump_attention: bool = False) -> None:
    stage_gen_bench(cfg)
    if cfg.pseudo_mode == "detector":
        stage_train_detectors(cfg)
    stage_pseudo_label(cfg)
    stage_train_lat(cfg)
    stage_transfer(cfg, dump_attention=dump_attention)
    stage_train_downstream(cfg)
    stage_evaluate(cfg)
