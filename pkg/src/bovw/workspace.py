"""Persistent workspace wiring the pipeline stages together.

Layout under the workspace root:

    manifest.tsv          dataset manifest (scan)
    config.txt            the configuration the artifacts were built with
    splits/split.txt      stratified train/test plan
    descriptors/          per-entry keypoint + descriptor files (extract)
    codebooks/            sift.cb / freak.cb (codebook)
    encoded/corpus.enc    fused vectors for every entry (encode)
    models/svm.model      one-vs-rest classifier (train)
    reports/              evaluation artifacts and checkpoints

Each artifact carries a ``.prov`` sidecar with the SHA-256 of its direct
inputs; stages verify these before reading so stale artifacts are
reported instead of silently reused.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import storage
from .codebook import train_codebook
from .config import PipelineConfig
from .dataset import DatasetManifest, SplitPlan, load_image, make_split, sample_features
from .descriptors import KIND_FREAK, KIND_SIFT, concat_sets
from .encoder import encode, extract_both, fuse
from .errors import MissingArtifactError
from .evaluation import DescriptorProvider, derive_seed
from .retrieval import RankedResult, retrieve, train_svm

logger = logging.getLogger(__name__)


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.tsv"

    @property
    def config_path(self) -> Path:
        return self.root / "config.txt"

    @property
    def split_path(self) -> Path:
        return self.root / "splits" / "split.txt"

    @property
    def descriptors_dir(self) -> Path:
        return self.root / "descriptors"

    @property
    def codebooks_dir(self) -> Path:
        return self.root / "codebooks"

    @property
    def encoded_path(self) -> Path:
        return self.root / "encoded" / "corpus.enc"

    @property
    def model_path(self) -> Path:
        return self.root / "models" / "svm.model"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def codebook_path(self, kind: str) -> Path:
        return self.codebooks_dir / f"{kind}.cb"

    def ensure_dirs(self) -> None:
        for d in (self.root, self.split_path.parent, self.descriptors_dir,
                  self.codebooks_dir, self.encoded_path.parent,
                  self.model_path.parent, self.reports_dir):
            d.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------- loading

    def load_manifest(self, dataset_root: str | Path | None = None) -> DatasetManifest:
        storage.require_artifact(self.manifest_path, "scan")
        root = dataset_root or self._recorded_dataset_root()
        return storage.load_manifest(self.manifest_path, root)

    def _recorded_dataset_root(self) -> Path:
        root_file = self.root / "dataset_root.txt"
        if not root_file.exists():
            raise MissingArtifactError(
                f"{root_file} is missing; run `bovw scan` first")
        return Path(root_file.read_text(encoding="utf-8").strip())

    def manifest_digest(self) -> str:
        return storage.file_sha256(self.manifest_path)


# ------------------------------------------------------------------- stages

def stage_scan(ws: Workspace, dataset_root: str | Path) -> DatasetManifest:
    from .dataset import scan_dataset
    ws.ensure_dirs()
    manifest = scan_dataset(dataset_root)
    storage.save_manifest(ws.manifest_path, manifest)
    (ws.root / "dataset_root.txt").write_text(str(Path(dataset_root).resolve()) + "\n",
                                              encoding="utf-8")
    digest_inputs = {}
    for rel, _ in manifest.entries:
        digest_inputs[rel] = storage.file_sha256(Path(manifest.root) / rel)
    storage.write_provenance(ws.manifest_path, digest_inputs)
    logger.info("scanned %d classes, %d images", len(manifest.classes), len(manifest.entries))
    return manifest


def stage_extract(ws: Workspace, cfg: PipelineConfig, channel: str = "both",
                  threads: int = 1) -> int:
    """Extract descriptors for every manifest entry; idempotent."""
    manifest = ws.load_manifest()
    ws.ensure_dirs()
    provider = DescriptorProvider(manifest, cfg, disk_dir=ws.descriptors_dir)
    indices = list(range(len(manifest.entries)))
    provider.preload(indices, threads)
    count = 0
    digest = ws.manifest_digest()
    for index in indices:
        fset, sset = provider.get(index)
        if channel in ("both", "freak"):
            count += len(fset)
        if channel in ("both", "sift"):
            count += len(sset)
        kp_path = ws.descriptors_dir / f"{index:06d}.kp"
        storage.save_keypoints(kp_path, sset.keypoints or fset.keypoints)
    storage.write_provenance(ws.descriptors_dir / "extract.done",
                             {"manifest.tsv": digest})
    (ws.descriptors_dir / "extract.done").write_text("ok\n", encoding="utf-8")
    logger.info("extracted %d descriptors over %d images", count, len(indices))
    return count


def _check_extracted(ws: Workspace) -> None:
    marker = ws.descriptors_dir / "extract.done"
    if not marker.exists():
        raise MissingArtifactError(f"{marker} is missing; run `bovw extract` first")
    storage.check_provenance(marker, {"manifest.tsv": ws.manifest_digest()})


def stage_codebook(ws: Workspace, cfg: PipelineConfig, z: int, fraction: float,
                   seed: int) -> None:
    """Train both channel codebooks from the train split's sampled features."""
    manifest = ws.load_manifest()
    _check_extracted(ws)
    ws.ensure_dirs()
    split = _ensure_split(ws, manifest, cfg, seed)
    provider = DescriptorProvider(manifest, cfg, disk_dir=ws.descriptors_dir)
    freak_sets, sift_sets = [], []
    for index in split.train:
        fset, sset = provider.get(index)
        if len(fset):
            freak_sets.append(fset)
        if len(sset):
            sift_sets.append(sset)
    digest = ws.manifest_digest()
    for kind, sets, code in ((KIND_FREAK, freak_sets, 0), (KIND_SIFT, sift_sets, 1)):
        pooled = concat_sets(sets)
        sampled = sample_features(pooled, fraction, derive_seed(seed, 0, code))
        cb = train_codebook(sampled, z, derive_seed(seed, 1, code),
                            cfg.kmeans_max_iters, cfg.kmeans_tol, cfg.kmeans_n_init)
        path = ws.codebook_path(kind)
        storage.save_codebook(path, cb)
        storage.write_provenance(path, {"manifest.tsv": digest,
                                        "split.txt": storage.file_sha256(ws.split_path)})
        logger.info("trained %s codebook: Z=%d on %d descriptors", kind, z, len(sampled))


def _ensure_split(ws: Workspace, manifest: DatasetManifest, cfg: PipelineConfig,
                  seed: int) -> SplitPlan:
    if ws.split_path.exists():
        plan = storage.load_split(ws.split_path)
        if plan.seed == seed and plan.train_fraction == cfg.train_fraction:
            return plan
    plan = make_split(manifest, cfg.train_fraction, seed)
    storage.save_split(ws.split_path, plan)
    storage.write_provenance(ws.split_path, {"manifest.tsv": ws.manifest_digest()})
    return plan


def stage_encode(ws: Workspace, cfg: PipelineConfig) -> None:
    """Encode every entry into a fused vector against the stored codebooks."""
    manifest = ws.load_manifest()
    _check_extracted(ws)
    for kind in (KIND_FREAK, KIND_SIFT):
        storage.require_artifact(ws.codebook_path(kind), "codebook")
        storage.check_provenance(ws.codebook_path(kind),
                                 {"manifest.tsv": ws.manifest_digest()})
    cb_freak = storage.load_codebook(ws.codebook_path(KIND_FREAK))
    cb_sift = storage.load_codebook(ws.codebook_path(KIND_SIFT))
    provider = DescriptorProvider(manifest, cfg, disk_dir=ws.descriptors_dir)
    labels = np.array([ci for _, ci in manifest.entries], dtype=np.int64)
    vectors = np.zeros((len(manifest.entries), 2 * cb_freak.size), dtype=np.float32)
    for index in range(len(manifest.entries)):
        fset, sset = provider.get(index)
        vectors[index] = fuse(encode(cb_freak, fset), encode(cb_sift, sset)).values
    storage.save_encoded(ws.encoded_path, cb_freak.size, labels, vectors)
    storage.write_provenance(ws.encoded_path, {
        "manifest.tsv": ws.manifest_digest(),
        "codebooks/freak.cb": storage.file_sha256(ws.codebook_path(KIND_FREAK)),
        "codebooks/sift.cb": storage.file_sha256(ws.codebook_path(KIND_SIFT)),
    })
    logger.info("encoded %d images at 2Z=%d", len(labels), vectors.shape[1])


def stage_train(ws: Workspace, cfg: PipelineConfig, c_reg: float, seed: int) -> None:
    """Train the one-vs-rest classifier on the train split's fused vectors."""
    manifest = ws.load_manifest()
    storage.require_artifact(ws.encoded_path, "encode")
    storage.check_provenance(ws.encoded_path, {"manifest.tsv": ws.manifest_digest()})
    storage.require_artifact(ws.split_path, "codebook")
    _, labels, vectors = storage.load_encoded(ws.encoded_path)
    split = storage.load_split(ws.split_path)
    train_idx = np.array(split.train, dtype=np.int64)
    model = train_svm(vectors[train_idx], labels[train_idx], c_reg, seed, cfg.svm_epochs)
    storage.save_model(ws.model_path, model)
    storage.write_provenance(ws.model_path, {
        "encoded/corpus.enc": storage.file_sha256(ws.encoded_path),
        "splits/split.txt": storage.file_sha256(ws.split_path),
    })
    logger.info("trained %d-class model on %d vectors", model.n_classes, len(train_idx))


def stage_query(ws: Workspace, cfg: PipelineConfig, image_path: str | Path,
                k: int) -> tuple[RankedResult, DatasetManifest]:
    """Rank the encoded corpus against one query image."""
    manifest = ws.load_manifest()
    storage.require_artifact(ws.encoded_path, "encode")
    storage.require_artifact(ws.model_path, "train")
    storage.check_provenance(ws.model_path,
                             {"encoded/corpus.enc": storage.file_sha256(ws.encoded_path)})
    cb_freak = storage.load_codebook(storage.require_artifact(
        ws.codebook_path(KIND_FREAK), "codebook"))
    cb_sift = storage.load_codebook(storage.require_artifact(
        ws.codebook_path(KIND_SIFT), "codebook"))
    model = storage.load_model(ws.model_path)
    _, labels, vectors = storage.load_encoded(ws.encoded_path)

    img = load_image(image_path)
    freak_set, sift_set = extract_both(img, cfg.detector_params(),
                                       pattern=cfg.pattern())
    fused = fuse(encode(cb_freak, freak_set), encode(cb_sift, sift_set))
    ranked = retrieve(model, fused.values, list(range(len(labels))), vectors, labels,
                      min(k, len(labels)), rule=cfg.ranking_rule)
    return ranked, manifest
