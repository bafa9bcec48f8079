"""Retrieval evaluation protocol: repeated stratified splits, a codebook
size x feature fraction sweep, top-k precision/recall per class, and
report artifacts (CSV tables, curve data, HTML galleries).

Every test image queries the retrieval database (the test set by default)
with itself excluded. Per-class precision is the mean over that class's
queries; the mean average precision (MAP) of a configuration is the mean
of per-class precisions, averaged over runs. All randomness derives from
the base seed, so identical configurations reproduce identical reports.
"""

from __future__ import annotations

import html
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import Codebook, assign_words, train_codebook
from .config import CHANNEL_MODES, PipelineConfig
from .dataset import DatasetManifest, load_image, make_split, sample_features
from .descriptors import KIND_FREAK, KIND_SIFT, DescriptorSet, concat_sets
from .encoder import encode, fuse
from .errors import ParameterError
from .freak import compute_all_freak
from .retrieval import (RULE_CLASS_FILTERED, RankedResult, SvmModel, retrieve,
                        score_many, train_svm)
from .scalespace import detect_keypoints
from .sift import compute_all_sift

GALLERY_RUN = 0  # retrieval examples are captured on the first run


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from integer components."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _fraction_code(fraction: float) -> int:
    return int(round(fraction * 10000))


# ------------------------------------------------------------------ metrics

def precision_at_k(ranked: RankedResult, query_class: int, k: int) -> float:
    """Fraction of the top-k results sharing the query's class."""
    if len(ranked.ids) < k:
        raise ParameterError(f"ranked list has {len(ranked.ids)} < k={k} entries")
    correct = int(np.sum(ranked.classes[:k] == query_class))
    return correct / k


def recall_at_k(ranked: RankedResult, query_class: int, k: int, class_size: int) -> float:
    """Correct results in the top k relative to the class size."""
    if class_size < 1:
        raise ParameterError("class_size must be >= 1")
    if len(ranked.ids) < k:
        raise ParameterError(f"ranked list has {len(ranked.ids)} < k={k} entries")
    correct = int(np.sum(ranked.classes[:k] == query_class))
    return correct / class_size


# ------------------------------------------------------------ configuration

@dataclass
class EvalConfig:
    """Protocol parameters for one experiment sweep."""

    codebook_sizes: list[int] = field(default_factory=lambda: [50, 100, 200, 300, 400, 600, 800])
    feature_fractions: list[float] = field(default_factory=lambda: [0.25, 0.50, 0.75])
    runs: int = 10
    top_k: int = 20
    channel_modes: list[str] = field(default_factory=lambda: list(CHANNEL_MODES))
    eval_database: str = "test"
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1 or self.top_k < 1:
            raise ParameterError("runs and top_k must be >= 1")
        if any(z < 2 for z in self.codebook_sizes):
            raise ParameterError("codebook sizes must be >= 2")
        for mode in self.channel_modes:
            if mode not in CHANNEL_MODES:
                raise ParameterError(f"unknown channel mode {mode!r}")

    @classmethod
    def from_pipeline(cls, cfg: PipelineConfig) -> "EvalConfig":
        return cls(list(cfg.codebook_sizes), list(cfg.feature_fractions), cfg.runs,
                   cfg.top_k, list(cfg.channel_modes), cfg.eval_database,
                   cfg.train_fraction, cfg.seed)


@dataclass
class QueryRecord:
    """Tallies for one query at one sweep cell."""

    mode: str
    z: int
    fraction: float
    run: int
    query_index: int
    query_class: int
    k: int
    k_r: int
    x_c_db: int
    x_c_full: int


@dataclass
class GalleryRecord:
    """One sample retrieval kept for the HTML gallery."""

    mode: str
    z: int
    fraction: float
    query_index: int
    query_class: int
    result_indices: list[int]
    result_classes: list[int]
    closeness: list[float]


@dataclass
class EvalReport:
    """All per-query tallies plus gallery samples for one sweep."""

    config: EvalConfig
    class_names: list[str]
    records: list[QueryRecord] = field(default_factory=list)
    galleries: list[GalleryRecord] = field(default_factory=list)

    def class_precisions(self, mode: str, z: int, fraction: float) -> dict[int, float]:
        """Per-class precision, averaged first within then across runs."""
        per_run: dict[tuple[int, int], list[float]] = {}
        for r in self.records:
            if r.mode == mode and r.z == z and _fraction_code(r.fraction) == _fraction_code(fraction):
                per_run.setdefault((r.run, r.query_class), []).append(r.k_r / r.k)
        by_class: dict[int, list[float]] = {}
        for (run, cls), vals in per_run.items():
            by_class.setdefault(cls, []).append(float(np.mean(vals)))
        return {cls: float(np.mean(vals)) for cls, vals in sorted(by_class.items())}

    def class_recalls(self, mode: str, z: int, fraction: float,
                      full: bool = True) -> dict[int, float]:
        per_run: dict[tuple[int, int], list[float]] = {}
        for r in self.records:
            if r.mode == mode and r.z == z and _fraction_code(r.fraction) == _fraction_code(fraction):
                denom = r.x_c_full if full else r.x_c_db
                per_run.setdefault((r.run, r.query_class), []).append(r.k_r / denom)
        by_class: dict[int, list[float]] = {}
        for (run, cls), vals in per_run.items():
            by_class.setdefault(cls, []).append(float(np.mean(vals)))
        return {cls: float(np.mean(vals)) for cls, vals in sorted(by_class.items())}

    def map_value(self, mode: str, z: int, fraction: float) -> float:
        """Mean of per-class precisions for one sweep cell."""
        per_class = self.class_precisions(mode, z, fraction)
        return float(np.mean(list(per_class.values()))) if per_class else math.nan

    def map_per_run(self, mode: str, z: int, fraction: float) -> list[float]:
        """MAP of each run separately (mean of that run's class precisions)."""
        per: dict[int, dict[int, list[float]]] = {}
        for r in self.records:
            if r.mode == mode and r.z == z and _fraction_code(r.fraction) == _fraction_code(fraction):
                per.setdefault(r.run, {}).setdefault(r.query_class, []).append(r.k_r / r.k)
        out = []
        for run in sorted(per):
            class_means = [float(np.mean(v)) for _, v in sorted(per[run].items())]
            out.append(float(np.mean(class_means)))
        return out

    def best_cell(self, mode: str) -> tuple[int, float]:
        """(z, fraction) with the highest MAP for a mode."""
        best = None
        for z in self.config.codebook_sizes:
            for fraction in self.config.feature_fractions:
                value = self.map_value(mode, z, fraction)
                if not math.isnan(value) and (best is None or value > best[0]):
                    best = (value, z, fraction)
        if best is None:
            raise ParameterError(f"report has no records for mode {mode!r}")
        return best[1], best[2]


# ------------------------------------------------------- descriptor caching

class DescriptorProvider:
    """Per-entry descriptor extraction with in-memory (and optional disk)
    caching; extraction is deterministic so caching across runs is safe."""

    def __init__(self, manifest: DatasetManifest, cfg: PipelineConfig,
                 disk_dir: Path | None = None):
        self.manifest = manifest
        self.cfg = cfg
        self.params = cfg.detector_params()
        self.pattern = cfg.pattern()
        from .freak import load_default_pairs
        self.pairs = load_default_pairs()
        self.disk_dir = disk_dir
        self._cache: dict[int, tuple[DescriptorSet, DescriptorSet]] = {}

    def get(self, index: int) -> tuple[DescriptorSet, DescriptorSet]:
        if index in self._cache:
            return self._cache[index]
        pair = None
        if self.disk_dir is not None:
            pair = self._load_from_disk(index)
        if pair is None:
            pair = extract_entry(self.manifest, index, self.cfg)
            if self.disk_dir is not None:
                self._save_to_disk(index, pair)
        self._cache[index] = pair
        return pair

    def preload(self, indices: list[int], threads: int = 1) -> None:
        missing = [i for i in indices if i not in self._cache
                   and (self.disk_dir is None or self._load_from_disk(i) is None)]
        if threads > 1 and len(missing) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = pool.map(_extract_entry_worker,
                                   [(self.manifest, i, self.cfg) for i in missing])
                for index, pair in zip(missing, results):
                    self._cache[index] = pair
                    if self.disk_dir is not None:
                        self._save_to_disk(index, pair)
        else:
            for index in missing:
                self.get(index)

    def _paths(self, index: int) -> tuple[Path, Path]:
        assert self.disk_dir is not None
        return (self.disk_dir / f"{index:06d}.freak.desc",
                self.disk_dir / f"{index:06d}.sift.desc")

    def _load_from_disk(self, index: int) -> tuple[DescriptorSet, DescriptorSet] | None:
        from .storage import load_descriptors
        fp, sp = self._paths(index)
        if not fp.exists() or not sp.exists():
            return None
        pair = (load_descriptors(fp), load_descriptors(sp))
        self._cache[index] = pair
        return pair

    def _save_to_disk(self, index: int, pair: tuple[DescriptorSet, DescriptorSet]) -> None:
        from .storage import save_descriptors
        self.disk_dir.mkdir(parents=True, exist_ok=True)
        fp, sp = self._paths(index)
        save_descriptors(fp, pair[0])
        save_descriptors(sp, pair[1])


def extract_entry(manifest: DatasetManifest, index: int,
                  cfg: PipelineConfig) -> tuple[DescriptorSet, DescriptorSet]:
    """Extract both channels for one manifest entry (shared detector run)."""
    from .freak import load_default_pairs
    img = load_image(manifest.entry_path(index))
    pyr, kps = detect_keypoints(img, cfg.detector_params())
    freak_set = compute_all_freak(img, kps, cfg.pattern(), load_default_pairs())
    sift_set = compute_all_sift(pyr, kps)
    return freak_set, sift_set


def _extract_entry_worker(args) -> tuple[DescriptorSet, DescriptorSet]:
    manifest, index, cfg = args
    return extract_entry(manifest, index, cfg)


# ----------------------------------------------------------- the experiment

def _mode_vectors(mode: str, fused: np.ndarray, z: int) -> np.ndarray:
    if mode == "fused":
        return fused
    if mode == "freak":
        return fused[:, :z]
    return fused[:, z:]


def run_experiment(manifest: DatasetManifest, config: EvalConfig,
                   pipeline_cfg: PipelineConfig | None = None,
                   provider: DescriptorProvider | None = None,
                   checkpoint_dir: Path | None = None,
                   threads: int = 1) -> EvalReport:
    """Execute the full sweep and return per-query tallies.

    Completed (run, fraction, size) cells are checkpointed to
    ``checkpoint_dir`` when given, and reloaded instead of recomputed.
    """
    pipeline_cfg = pipeline_cfg or PipelineConfig()
    provider = provider or DescriptorProvider(manifest, pipeline_cfg)
    report = EvalReport(config, list(manifest.classes))
    labels = np.array([ci for _, ci in manifest.entries], dtype=np.int64)
    full_class_sizes = np.bincount(labels, minlength=len(manifest.classes))

    all_indices = list(range(len(manifest.entries)))
    provider.preload(all_indices, threads)

    for run in range(config.runs):
        split = make_split(manifest, config.train_fraction, config.seed + run)
        for fraction in config.feature_fractions:
            sampled = _sampled_train_sets(provider, split.train, fraction, config, run)
            for z in config.codebook_sizes:
                cell = _load_checkpoint(checkpoint_dir, run, fraction, z)
                if cell is not None:
                    records, galleries = cell
                else:
                    records, galleries = _run_cell(manifest, config, pipeline_cfg, provider,
                                                   split, sampled, labels, full_class_sizes,
                                                   run, fraction, z)
                    _save_checkpoint(checkpoint_dir, run, fraction, z, records, galleries)
                report.records.extend(records)
                report.galleries.extend(galleries)
    return report


def _sampled_train_sets(provider: DescriptorProvider, train_indices: list[int],
                        fraction: float, config: EvalConfig,
                        run: int) -> dict[str, DescriptorSet]:
    freak_sets = []
    sift_sets = []
    for index in train_indices:
        fset, sset = provider.get(index)
        if len(fset):
            freak_sets.append(fset)
        if len(sset):
            sift_sets.append(sset)
    out: dict[str, DescriptorSet] = {}
    for kind, sets, code in ((KIND_FREAK, freak_sets, 0), (KIND_SIFT, sift_sets, 1)):
        pooled = concat_sets(sets)
        seed = derive_seed(config.seed, run, _fraction_code(fraction), code)
        out[kind] = sample_features(pooled, fraction, seed)
    return out


def _run_cell(manifest, config, pipeline_cfg, provider, split, sampled, labels,
              full_class_sizes, run: int, fraction: float,
              z: int) -> tuple[list[QueryRecord], list[GalleryRecord]]:
    cbs: dict[str, Codebook] = {}
    for kind, code in ((KIND_FREAK, 0), (KIND_SIFT, 1)):
        seed = derive_seed(config.seed, run, _fraction_code(fraction), z, code)
        cbs[kind] = train_codebook(sampled[kind], z, seed,
                                   pipeline_cfg.kmeans_max_iters, pipeline_cfg.kmeans_tol,
                                   pipeline_cfg.kmeans_n_init)

    n = len(manifest.entries)
    fused = np.zeros((n, 2 * z), dtype=np.float32)
    for index in range(n):
        fset, sset = provider.get(index)
        fused[index] = fuse(encode(cbs[KIND_FREAK], fset), encode(cbs[KIND_SIFT], sset)).values

    train_idx = np.array(split.train, dtype=np.int64)
    test_idx = np.array(split.test, dtype=np.int64)
    db_idx = test_idx if config.eval_database == "test" else np.arange(n, dtype=np.int64)

    records: list[QueryRecord] = []
    galleries: list[GalleryRecord] = []
    for mode_i, mode in enumerate(config.channel_modes):
        vectors = _mode_vectors(mode, fused, z)
        svm_seed = derive_seed(config.seed, run, _fraction_code(fraction), z, 10 + mode_i)
        model = train_svm(vectors[train_idx], labels[train_idx], pipeline_cfg.svm_c_reg,
                          svm_seed, pipeline_cfg.svm_epochs)
        recs, gals = _evaluate_queries(model, vectors, labels, test_idx, db_idx,
                                       full_class_sizes, config, pipeline_cfg,
                                       mode, run, fraction, z)
        records.extend(recs)
        galleries.extend(gals)
    return records, galleries


def _evaluate_queries(model: SvmModel, vectors: np.ndarray, labels: np.ndarray,
                      query_idx: np.ndarray, db_idx: np.ndarray,
                      full_class_sizes: np.ndarray, config: EvalConfig,
                      pipeline_cfg: PipelineConfig, mode: str, run: int,
                      fraction: float, z: int) -> tuple[list[QueryRecord], list[GalleryRecord]]:
    records: list[QueryRecord] = []
    galleries: list[GalleryRecord] = []
    seen_gallery_classes: set[int] = set()
    k = config.top_k
    for q in query_idx:
        mask = db_idx != q
        db = db_idx[mask]
        if len(db) < k:
            raise ParameterError(
                f"retrieval database has {len(db)} images, fewer than top_k={k}")
        ranked = retrieve(model, vectors[q], list(db), vectors[db], labels[db], k,
                          rule=pipeline_cfg.ranking_rule)
        qc = int(labels[q])
        k_r = int(np.sum(ranked.classes[:k] == qc))
        x_c_db = int(np.sum(labels[db] == qc))
        records.append(QueryRecord(mode, z, fraction, run, int(q), qc, k, k_r,
                                   x_c_db, int(full_class_sizes[qc])))
        if run == GALLERY_RUN and qc not in seen_gallery_classes:
            seen_gallery_classes.add(qc)
            galleries.append(GalleryRecord(
                mode, z, fraction, int(q), qc,
                [int(i) for i in ranked.ids],
                [int(c) for c in ranked.classes],
                [float(c) for c in ranked.closeness]))
    return records, galleries


# --------------------------------------------------------------- checkpoints

def _checkpoint_path(checkpoint_dir: Path, run: int, fraction: float, z: int) -> Path:
    return checkpoint_dir / f"run{run}_f{_fraction_code(fraction):05d}_z{z}.csv"


def _save_checkpoint(checkpoint_dir: Path | None, run: int, fraction: float, z: int,
                     records: list[QueryRecord], galleries: list[GalleryRecord]) -> None:
    if checkpoint_dir is None:
        return
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    lines = ["kind,mode,z,fraction,run,query_index,query_class,k,k_r,x_c_db,x_c_full,extra"]
    for r in records:
        lines.append(f"query,{r.mode},{r.z},{r.fraction},{r.run},{r.query_index},"
                     f"{r.query_class},{r.k},{r.k_r},{r.x_c_db},{r.x_c_full},")
    for g in galleries:
        packed = ";".join(f"{i}:{c}:{d!r}" for i, c, d in
                          zip(g.result_indices, g.result_classes, g.closeness))
        lines.append(f"gallery,{g.mode},{g.z},{g.fraction},{GALLERY_RUN},{g.query_index},"
                     f"{g.query_class},0,0,0,0,{packed}")
    path = _checkpoint_path(checkpoint_dir, run, fraction, z)
    tmp = path.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _load_checkpoint(checkpoint_dir: Path | None, run: int, fraction: float,
                     z: int) -> tuple[list[QueryRecord], list[GalleryRecord]] | None:
    if checkpoint_dir is None:
        return None
    path = _checkpoint_path(checkpoint_dir, run, fraction, z)
    if not path.exists():
        return None
    records: list[QueryRecord] = []
    galleries: list[GalleryRecord] = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        parts = line.split(",", 11)
        kind, mode = parts[0], parts[1]
        z_v, fraction_v, run_v = int(parts[2]), float(parts[3]), int(parts[4])
        q_index, q_class = int(parts[5]), int(parts[6])
        if kind == "query":
            records.append(QueryRecord(mode, z_v, fraction_v, run_v, q_index, q_class,
                                       int(parts[7]), int(parts[8]), int(parts[9]),
                                       int(parts[10])))
        else:
            ids, classes, closeness = [], [], []
            if parts[11]:
                for chunk in parts[11].split(";"):
                    i, c, d = chunk.split(":")
                    ids.append(int(i))
                    classes.append(int(c))
                    closeness.append(float(d))
            galleries.append(GalleryRecord(mode, z_v, fraction_v, q_index, q_class,
                                           ids, classes, closeness))
    return records, galleries


# ------------------------------------------------------------------ reports

def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def emit_reports(report: EvalReport, out_dir: str | Path,
                 manifest: DatasetManifest | None = None) -> list[Path]:
    """Write CSV tables, curve data and (when a manifest is available)
    HTML retrieval galleries; re-emitting the same report is byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    cfg = report.config

    for mode in cfg.channel_modes:
        lines = ["fraction," + ",".join(str(z) for z in cfg.codebook_sizes)]
        columns: dict[int, list[float]] = {z: [] for z in cfg.codebook_sizes}
        for fraction in cfg.feature_fractions:
            row = [f"{int(round(fraction * 100))}%"]
            for z in cfg.codebook_sizes:
                value = report.map_value(mode, z, fraction)
                columns[z].append(value)
                row.append(_pct(value))
            lines.append(",".join(row))
        mean_row = ["Mean"] + [_pct(float(np.mean(columns[z]))) for z in cfg.codebook_sizes]
        lines.append(",".join(mean_row))
        path = out_dir / f"table_map_{mode}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

    curve_lines = ["size," + ",".join(f"map_{m}" for m in cfg.channel_modes)]
    for z in cfg.codebook_sizes:
        cells = []
        for mode in cfg.channel_modes:
            vals = [report.map_value(mode, z, f) for f in cfg.feature_fractions]
            cells.append(_pct(float(np.mean(vals))))
        curve_lines.append(f"{z}," + ",".join(cells))
    path = out_dir / "map_curve.csv"
    path.write_text("\n".join(curve_lines) + "\n", encoding="utf-8")
    written.append(path)

    primary_mode = cfg.channel_modes[0]
    best_z, best_fraction = report.best_cell(primary_mode)
    prec = report.class_precisions(primary_mode, best_z, best_fraction)
    rec_full = report.class_recalls(primary_mode, best_z, best_fraction, full=True)
    rec_db = report.class_recalls(primary_mode, best_z, best_fraction, full=False)
    lines = [f"# mode={primary_mode} z={best_z} fraction={best_fraction}",
             "class,precision,recall_full,recall_db"]
    for ci in sorted(prec):
        name = report.class_names[ci] if ci < len(report.class_names) else str(ci)
        lines.append(f"{name},{_pct(prec[ci])},{_pct(rec_full[ci])},{_pct(rec_db[ci])}")
    lines.append("Mean," + ",".join(_pct(float(np.mean(list(d.values()))))
                                    for d in (prec, rec_full, rec_db)))
    path = out_dir / "class_metrics.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    lines = ["mode,z,fraction,run,query_index,query_class,k,k_r,x_c_db,x_c_full"]
    for r in report.records:
        lines.append(f"{r.mode},{r.z},{r.fraction},{r.run},{r.query_index},"
                     f"{r.query_class},{r.k},{r.k_r},{r.x_c_db},{r.x_c_full}")
    path = out_dir / "queries.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)

    if manifest is not None:
        written.extend(_emit_galleries(report, out_dir, manifest, primary_mode,
                                       best_z, best_fraction))
    return written


def _emit_galleries(report: EvalReport, out_dir: Path, manifest: DatasetManifest,
                    mode: str, z: int, fraction: float) -> list[Path]:
    gallery_dir = out_dir / "gallery"
    gallery_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for g in report.galleries:
        if g.mode != mode or g.z != z or _fraction_code(g.fraction) != _fraction_code(fraction):
            continue
        name = report.class_names[g.query_class]
        path = gallery_dir / f"{mode}_z{z}_f{_fraction_code(fraction):05d}_{name}.html"
        path.write_text(_gallery_html(g, manifest, gallery_dir, report), encoding="utf-8")
        written.append(path)
    return written


def _gallery_html(g: GalleryRecord, manifest: DatasetManifest, gallery_dir: Path,
                  report: EvalReport) -> str:
    def rel(index: int) -> str:
        target = manifest.entry_path(index)
        return html.escape(os.path.relpath(target, gallery_dir))

    name = html.escape(report.class_names[g.query_class])
    parts = [
        "<!DOCTYPE html>",
        f"<html><head><meta charset='utf-8'><title>query {g.query_index} ({name})</title>",
        "<style>img{height:120px;margin:4px;border:4px solid #c33}"
        "img.ok{border-color:#2a2}figure{display:inline-block;text-align:center;"
        "font-family:sans-serif;font-size:12px;margin:4px}</style></head><body>",
        f"<h1>Query: class {name} (image {g.query_index})</h1>",
        f"<figure><img class='ok' src='{rel(g.query_index)}'><figcaption>query</figcaption></figure>",
        "<h2>Top results</h2>",
    ]
    for rank, (idx, cls, closeness) in enumerate(
            zip(g.result_indices, g.result_classes, g.closeness), 1):
        correct = " class='ok'" if cls == g.query_class else ""
        caption = (f"#{rank} {html.escape(report.class_names[cls])}"
                   f" (closeness {closeness:.4g})")
        parts.append(f"<figure><img{correct} src='{rel(idx)}'>"
                     f"<figcaption>{caption}</figcaption></figure>")
    parts.append("</body></html>")
    return "\n".join(parts)
