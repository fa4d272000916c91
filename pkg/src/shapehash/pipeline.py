"""Stage orchestration over a shared working directory.

Every stage communicates with the next only through declared file formats:
rawf32 images and descriptor matrices, the JSON filter bank, the CHSH model
file, binary codes files, and CSV manifests.  Each run also drops a
machine-readable JSON report under ``<workdir>/reports``.  All outputs are
written deterministically, so re-running a stage with identical inputs
produces byte-identical files.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cosfire, evaluation, hashnet, imaging, retrieval
from .config import GridSpec, PipelineConfig
from .errors import DataError, FilterConfigurationError
from .hashnet import DshLossParams, TrainConfig

logger = logging.getLogger(__name__)

_MAX_CONFIG_ATTEMPTS = 10


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _write_report(workdir: Path, name: str, payload: dict) -> str:
    report = Path(workdir) / "reports" / f"{name}.json"
    _write_json(report, payload)
    return str(report)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(str(cell) for cell in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Preprocess
# ---------------------------------------------------------------------------


def run_preprocess(
    manifest: Path,
    workdir: Path,
    n_sigma: float = 3.0,
    max_iters: int = 100,
) -> dict:
    """Sigma-clip every manifest image into rawf32 files under the workdir."""
    workdir = Path(workdir)
    entries = imaging.read_manifest(Path(manifest))
    out_entries = []
    failures = []
    counts: dict[str, int] = {}
    for row, entry in enumerate(entries):
        out_dir = workdir / "images" / entry.split
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / f"{row:05d}_{Path(entry.path).stem}.rf32"
        try:
            fmt = imaging.detect_format(entry.path)
            img = imaging.load_image(entry.path, fmt)
            clipped = imaging.sigma_clip(img, n_sigma=n_sigma, max_iters=max_iters)
        except DataError as exc:
            failures.append(f"{entry.path}: {exc}")
            continue
        imaging.write_rawf32(out_path, clipped)
        out_entries.append(imaging.ManifestEntry(out_path, entry.label, entry.split))
        counts[entry.split] = counts.get(entry.split, 0) + 1
    if failures:
        raise DataError(
            "preprocess failed for {} entr{}:\n{}".format(
                len(failures), "y" if len(failures) == 1 else "ies", "\n".join(failures)
            )
        )
    out_manifest = workdir / "preprocessed.csv"
    imaging.write_manifest(out_manifest, out_entries)
    payload = {
        "out_manifest": str(out_manifest),
        "images_dir": str(workdir / "images"),
        "counts": counts,
        "n_sigma": n_sigma,
        "max_iters": max_iters,
    }
    payload["report"] = _write_report(workdir, "preprocess", payload)
    return payload


def _load_preprocessed(workdir: Path) -> list[imaging.ManifestEntry]:
    manifest = Path(workdir) / "preprocessed.csv"
    if not manifest.exists():
        raise DataError(f"{manifest} not found; run the preprocess stage first")
    return imaging.read_manifest(manifest)


# ---------------------------------------------------------------------------
# Filter bank
# ---------------------------------------------------------------------------


def run_build_bank(
    workdir: Path,
    hyperparams: cosfire.CosfireHyperparams,
    orientation_count: int = 12,
    filters_per_class: int = 2,
    seed: int = 0,
) -> dict:
    """Configure filters on random training prototypes, one group per class."""
    workdir = Path(workdir)
    entries = [e for e in _load_preprocessed(workdir) if e.split == "train"]
    if not entries:
        raise DataError("preprocessed manifest has no training entries")
    by_label: dict[str, list[imaging.ManifestEntry]] = {}
    for entry in entries:
        by_label.setdefault(entry.label, []).append(entry)
    rng = np.random.default_rng(seed)
    filters: list[cosfire.CosfireFilter] = []
    labels: list[str] = []
    prototypes: list[str] = []
    for label in sorted(by_label):
        pool = by_label[label]
        failures = 0
        built = 0
        while built < filters_per_class:
            pick = pool[int(rng.integers(len(pool)))]
            img = imaging.load_image(pick.path, "rawf32")
            height, width = img.shape
            center = ((width - 1) / 2.0, (height - 1) / 2.0)
            try:
                flt = cosfire.configure_filter(img, center, hyperparams)
            except FilterConfigurationError:
                failures += 1
                logger.warning(
                    "class %r: prototype %s yielded no keypoints (failure %d/%d)",
                    label, pick.path, failures, _MAX_CONFIG_ATTEMPTS,
                )
                if failures >= _MAX_CONFIG_ATTEMPTS:
                    raise DataError(
                        f"class {label!r}: {failures} consecutive prototypes "
                        f"yielded no keypoints"
                    ) from None
                continue
            failures = 0
            built += 1
            filters.append(flt)
            labels.append(label)
            prototypes.append(str(pick.path))
    bank = cosfire.FilterBank(
        tuple(filters), cosfire.default_orientations(orientation_count), tuple(labels)
    )
    bank_path = workdir / "bank.json"
    cosfire.save_bank(bank_path, bank)
    payload = {
        "bank": str(bank_path),
        "n_filters": len(bank),
        "classes": sorted(by_label),
        "tuples_per_filter": [len(flt) for flt in bank.filters],
        "prototypes": prototypes,
        "orientation_count": orientation_count,
        "seed": seed,
    }
    payload["report"] = _write_report(workdir, "build_bank", payload)
    return payload


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def save_descriptors(
    path: Path, matrix: np.ndarray, labels: list[str], names: list[str]
) -> None:
    """Store a descriptor matrix as rawf32 plus a JSON identity sidecar."""
    imaging.write_rawf32(path, matrix)
    _write_json(
        Path(path).with_name(Path(path).name + ".json"),
        {"labels": list(labels), "names": list(names)},
    )


def load_descriptors(path: Path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a descriptor matrix with its labels and record names."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found; run the describe stage first")
    matrix = imaging.load_image(path, "rawf32")
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise DataError(f"{path}: missing sidecar {sidecar.name}")
    doc = json.loads(sidecar.read_text(encoding="utf-8"))
    labels = [str(l) for l in doc["labels"]]
    names = [str(n) for n in doc["names"]]
    if len(labels) != matrix.shape[0] or len(names) != matrix.shape[0]:
        raise DataError(f"{path}: sidecar rows disagree with the matrix height")
    return matrix, labels, names


def run_describe(workdir: Path, threads: int = 1) -> dict:
    """Compute a descriptor per preprocessed image, one matrix per split."""
    workdir = Path(workdir)
    bank_path = workdir / "bank.json"
    if not bank_path.exists():
        raise DataError(f"{bank_path} not found; run the build-bank stage first")
    bank = cosfire.load_bank(bank_path)
    entries = _load_preprocessed(workdir)
    out_dir = workdir / "descriptors"
    out_dir.mkdir(parents=True, exist_ok=True)

    def describe(entry: imaging.ManifestEntry) -> np.ndarray:
        img = imaging.load_image(entry.path, "rawf32")
        return cosfire.compute_descriptor(img, bank)

    files: dict[str, str] = {}
    rows: dict[str, int] = {}
    for split in imaging.SPLITS:
        split_entries = [e for e in entries if e.split == split]
        if not split_entries:
            continue
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                vectors = list(pool.map(describe, split_entries))
        else:
            vectors = [describe(e) for e in split_entries]
        matrix = np.stack(vectors)
        path = out_dir / f"{split}.rf32"
        save_descriptors(
            path,
            matrix,
            [e.label for e in split_entries],
            [Path(e.path).stem for e in split_entries],
        )
        files[split] = str(path)
        rows[split] = len(split_entries)
    payload = {
        "files": files,
        "rows": rows,
        "descriptor_length": len(bank),
        "threads": threads,
    }
    payload["report"] = _write_report(workdir, "describe", payload)
    return payload


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def run_train(
    workdir: Path,
    bits: int,
    train_cfg: TrainConfig,
    loss_params: DshLossParams,
    hidden: tuple[int, int] = (hashnet.HIDDEN_1, hashnet.HIDDEN_2),
) -> dict:
    """Train the hashing network on stored train/valid descriptors."""
    workdir = Path(workdir)
    train_x, train_labels, _ = load_descriptors(workdir / "descriptors" / "train.rf32")
    valid_x, valid_labels, _ = load_descriptors(workdir / "descriptors" / "valid.rf32")
    params, history = hashnet.train(
        train_x, train_labels, valid_x, valid_labels, bits, train_cfg, loss_params,
        hidden=hidden,
    )
    model_path = workdir / "model.chsh"
    hashnet.save_model(model_path, params, train_cfg, loss_params, extra={"bits": bits})
    best = max(history, key=lambda h: h["val_map"])
    payload = {
        "model": str(model_path),
        "bits": bits,
        "epochs_run": len(history),
        "best_epoch": best["epoch"],
        "best_val_map": best["val_map"],
        "final_train_loss": history[-1]["train_loss"],
        "history": history,
    }
    payload["report"] = _write_report(workdir, "train", payload)
    return payload


def run_grid(
    workdir: Path,
    bits: int,
    grid: GridSpec,
    base_cfg: TrainConfig,
    hidden: tuple[int, int] = (hashnet.HIDDEN_1, hashnet.HIDDEN_2),
) -> dict:
    """Train every grid combination at one bit size; accumulate CSV rows."""
    workdir = Path(workdir)
    train_x, train_labels, _ = load_descriptors(workdir / "descriptors" / "train.rf32")
    valid_x, valid_labels, _ = load_descriptors(workdir / "descriptors" / "valid.rf32")
    header = [
        "bits", "learning_rate", "batch_size", "l1_weight", "l2_weight",
        "margin", "reg_weight", "epochs_run", "best_epoch", "best_val_map",
    ]
    rows = []
    best_row: dict | None = None
    for combo in grid.combos():
        cfg = TrainConfig(
            learning_rate=combo["learning_rate"],
            batch_size=combo["batch_size"],
            epochs=base_cfg.epochs,
            seed=base_cfg.seed,
            patience=base_cfg.patience,
        )
        lp = DshLossParams(
            margin=combo["margin"],
            reg_weight=combo["reg_weight"],
            l1_weight=combo["l1_weight"],
            l2_weight=combo["l2_weight"],
        )
        _, history = hashnet.train(
            train_x, train_labels, valid_x, valid_labels, bits, cfg, lp, hidden=hidden
        )
        best = max(history, key=lambda h: h["val_map"])
        record = dict(combo)
        record.update(
            bits=bits,
            epochs_run=len(history),
            best_epoch=best["epoch"],
            best_val_map=best["val_map"],
        )
        rows.append([record[name] for name in header])
        if best_row is None or record["best_val_map"] > best_row["best_val_map"]:
            best_row = record
    csv_path = workdir / "reports" / f"grid_{bits}.csv"
    _write_csv(csv_path, header, rows)
    payload = {
        "csv": str(csv_path),
        "bits": bits,
        "combinations": len(rows),
        "best": best_row,
    }
    payload["report"] = _write_report(workdir, f"grid_{bits}", payload)
    return payload


# ---------------------------------------------------------------------------
# Threshold sweep, encoding, querying
# ---------------------------------------------------------------------------


def _infer_activations(model_path: Path, matrix: np.ndarray) -> np.ndarray:
    params, _ = hashnet.load_model(model_path)
    return hashnet.forward(matrix, params, mode="infer")


def run_sweep(
    workdir: Path,
    k_eval: int = 100,
    thresholds: tuple[float, ...] | None = None,
) -> dict:
    """Pick the binarization threshold that maximizes validation mAP."""
    workdir = Path(workdir)
    model_path = workdir / "model.chsh"
    if not model_path.exists():
        raise DataError(f"{model_path} not found; run the train stage first")
    train_x, train_labels, _ = load_descriptors(workdir / "descriptors" / "train.rf32")
    valid_x, valid_labels, _ = load_descriptors(workdir / "descriptors" / "valid.rf32")
    params, _ = hashnet.load_model(model_path)
    ref_acts = hashnet.forward(train_x, params, mode="infer")
    query_acts = hashnet.forward(valid_x, params, mode="infer")
    result = retrieval.threshold_sweep(
        query_acts, valid_labels, ref_acts, train_labels, k_eval, thresholds
    )
    curve_rows = [[point.threshold, point.score] for point in result.curve]
    curve_csv = workdir / "reports" / "sweep_curve.csv"
    _write_csv(curve_csv, ["threshold", "map_at_k"], curve_rows)
    payload = {
        "best_threshold": result.best_threshold,
        "k_eval": k_eval,
        "curve": [{"threshold": p.threshold, "map_at_k": p.score} for p in result.curve],
        "curve_csv": str(curve_csv),
    }
    payload["report"] = _write_report(workdir, "sweep", payload)
    return payload


def run_encode(workdir: Path, split: str, threshold: float) -> dict:
    """Binarize one split's activations into a codes file."""
    workdir = Path(workdir)
    if split not in imaging.SPLITS:
        raise DataError(f"split must be one of {imaging.SPLITS}, got {split!r}")
    model_path = workdir / "model.chsh"
    if not model_path.exists():
        raise DataError(f"{model_path} not found; run the train stage first")
    matrix, labels, _ = load_descriptors(workdir / "descriptors" / f"{split}.rf32")
    acts = _infer_activations(model_path, matrix)
    codes = [retrieval.binarize(row, threshold) for row in acts]
    out_dir = workdir / "codes"
    out_dir.mkdir(parents=True, exist_ok=True)
    codes_path = out_dir / f"{split}.codes"
    retrieval.save_codes(codes_path, codes, labels)
    payload = {
        "codes": str(codes_path),
        "split": split,
        "count": len(codes),
        "bits": codes[0].nbits,
        "threshold": threshold,
    }
    payload["report"] = _write_report(workdir, f"encode_{split}", payload)
    return payload


def query_code_from_image(
    image: Path,
    bank_path: Path,
    model_path: Path,
    threshold: float,
    n_sigma: float = 3.0,
    max_iters: int = 100,
) -> retrieval.HashCode:
    """Full single-image path: clip, describe, hash, binarize."""
    img = imaging.load_image(image, imaging.detect_format(image))
    clipped = imaging.sigma_clip(img, n_sigma=n_sigma, max_iters=max_iters)
    bank = cosfire.load_bank(bank_path)
    descriptor = cosfire.compute_descriptor(clipped, bank)
    acts = _infer_activations(model_path, descriptor[None, :])
    return retrieval.binarize(acts[0], threshold)


def run_query(
    index_path: Path,
    top_n: int = 10,
    code_file: Path | None = None,
    image: Path | None = None,
    bank_path: Path | None = None,
    model_path: Path | None = None,
    threshold: float = 0.0,
    n_sigma: float = 3.0,
    max_iters: int = 100,
) -> dict:
    """Rank an index against one query given as a codes file or an image."""
    index = retrieval.load_codes(Path(index_path))
    if (code_file is None) == (image is None):
        raise DataError("provide exactly one of code_file or image")
    if code_file is not None:
        holder = retrieval.load_codes(Path(code_file))
        if len(holder) == 0:
            raise DataError(f"{code_file}: codes file holds no records")
        code = holder.codes()[0]
    else:
        if bank_path is None or model_path is None:
            raise DataError("querying by image needs bank_path and model_path")
        code = query_code_from_image(
            Path(image), Path(bank_path), Path(model_path), threshold,
            n_sigma=n_sigma, max_iters=max_iters,
        )
    hits = retrieval.query(index, code, top_n)
    return {
        "index": str(index_path),
        "top_n": top_n,
        "results": [
            {"id": hit.id, "label": hit.label, "distance": hit.distance}
            for hit in hits
        ],
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _matrix_payload(matrix: evaluation.ClassDistanceMatrix) -> dict:
    return {
        "classes": list(matrix.classes),
        "means": [[float(v) for v in row] for row in matrix.means],
        "counts": [[int(v) for v in row] for row in matrix.counts],
    }


def run_evaluate(
    workdir: Path,
    index_path: Path,
    queries_path: Path,
    k_eval: int = 100,
) -> dict:
    """Score a query codes file against an index codes file."""
    workdir = Path(workdir)
    index = retrieval.load_codes(Path(index_path))
    queries = retrieval.load_codes(Path(queries_path))
    if len(queries) == 0:
        raise DataError(f"{queries_path}: codes file holds no records")
    query_codes = queries.codes()
    query_labels = list(queries.labels)
    results = evaluation.relevance_results(index, query_codes, query_labels, k_eval)
    score = evaluation.map_at_k(results)
    class_report = evaluation.map_at_r(index, query_codes, query_labels)
    within = evaluation.class_distance_matrix(query_codes, query_labels)
    cross = evaluation.class_distance_matrix_between(
        query_codes, query_labels, index.codes(), list(index.labels)
    )
    map_rows = [
        [label, entry["relevant"], entry["queries"], entry["map"]]
        for label, entry in class_report.per_class.items()
    ]
    map_csv = workdir / "reports" / "map_at_r.csv"
    _write_csv(map_csv, ["class", "relevant", "queries", "map"], map_rows)
    payload = {
        "index": str(index_path),
        "queries": str(queries_path),
        "k_eval": k_eval,
        "map_at_k": float(score),
        "map_at_r": {
            "per_class": class_report.per_class,
            "average": class_report.average,
        },
        "map_at_r_csv": str(map_csv),
        "query_set_matrix": _matrix_payload(within),
        "query_set_separability": evaluation.separability_ratio(within),
        "cross_matrix": _matrix_payload(cross),
        "cross_separability": evaluation.separability_ratio(cross),
    }
    payload["report"] = _write_report(workdir, "evaluate", payload)
    return payload


# ---------------------------------------------------------------------------
# Operation counts
# ---------------------------------------------------------------------------


def run_flops(
    layer_sizes: list[int] | None = None,
    batchnorm: list[bool] | None = None,
    activations: list[bool] | None = None,
    bank_path: Path | None = None,
    width: int = 150,
    height: int = 150,
    orientation_count: int = 12,
    workdir: Path | None = None,
) -> dict:
    """Network operation counts, with the descriptor stage listed alongside."""
    if layer_sizes is None:
        layer_sizes = [372, hashnet.HIDDEN_1, hashnet.HIDDEN_2, 72]
    n_layers = len(layer_sizes) - 1
    if batchnorm is None:
        batchnorm = [True] * (n_layers - 1) + [False]
    if activations is None:
        activations = [True] * n_layers
    breakdown = evaluation.mlp_flops(layer_sizes, batchnorm, activations)
    payload = {
        "layer_sizes": list(layer_sizes),
        "components": [{"name": n, "flops": f} for n, f in breakdown.components],
        "network_total": breakdown.total,
        "descriptor_stage_reference": evaluation.DESCRIPTOR_STAGE_FLOPS,
        "combined_reference": evaluation.DESCRIPTOR_STAGE_FLOPS + breakdown.total,
    }
    if bank_path is not None:
        bank = cosfire.load_bank(Path(bank_path))
        estimate = evaluation.descriptor_stage_estimate(
            len(bank),
            [len(f) for f in bank.filters],
            orientation_count,
            width,
            height,
            bank.filters[0].hyperparams,
        )
        payload["descriptor_stage_estimate"] = {
            "bank": str(bank_path),
            "width": width,
            "height": height,
            "orientation_count": orientation_count,
            "flops": estimate,
        }
    if workdir is not None:
        rows = [[n, f] for n, f in breakdown.components]
        rows.append(["total", breakdown.total])
        _write_csv(Path(workdir) / "reports" / "flops.csv", ["component", "flops"], rows)
        payload["report"] = _write_report(Path(workdir), "flops", payload)
    return payload
