"""Artifact file formats and input-hash provenance.

Every binary artifact starts with an 8-byte magic and a little-endian u32
version; readers refuse mismatched magics or versions. Text artifacts
(manifest, split plan, pair selection, config) are line-oriented UTF-8.

Each written artifact gets a ``<name>.prov`` sidecar recording the SHA-256
of its input files, so downstream stages can detect stale inputs.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .codebook import Codebook
from .dataset import DatasetManifest, SplitPlan
from .descriptors import FREAK_BYTES, KIND_FREAK, KIND_SIFT, SIFT_DIM, DescriptorSet
from .errors import FormatError, MissingArtifactError, StaleArtifactError
from .retrieval import SvmModel
from .scalespace import Keypoint

VERSION = 1

MAGIC_KEYPOINTS = b"BVWKPT1\n"
MAGIC_DESCRIPTORS = b"BVWDSC1\n"
MAGIC_CODEBOOK = b"BVWCBK1\n"
MAGIC_ENCODED = b"BVWENC1\n"
MAGIC_MODEL = b"BVWSVM1\n"

_KIND_CODES = {KIND_SIFT: 0, KIND_FREAK: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _read_header(f, magic: bytes, path: Path) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {VERSION})")


def require_artifact(path: str | Path, produced_by: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} is missing; run `bovw {produced_by}` first")
    return path


# ---------------------------------------------------------------- keypoints

def save_keypoints(path: str | Path, kps: list[Keypoint]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_KEYPOINTS)
        f.write(struct.pack("<II", VERSION, len(kps)))
        for kp in kps:
            f.write(struct.pack("<fffffBB", kp.x, kp.y, kp.scale, kp.orientation,
                                kp.response, kp.octave, kp.level))


def load_keypoints(path: str | Path) -> list[Keypoint]:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, MAGIC_KEYPOINTS, path)
        (count,) = struct.unpack("<I", f.read(4))
        out = []
        record = struct.Struct("<fffffBB")
        for _ in range(count):
            x, y, scale, ori, resp, octave, level = record.unpack(f.read(record.size))
            out.append(Keypoint(x, y, scale, ori, resp, octave, level))
        return out


# -------------------------------------------------------------- descriptors

def save_descriptors(path: str | Path, dset: DescriptorSet) -> None:
    dim = SIFT_DIM if dset.kind == KIND_SIFT else 512
    with open(path, "wb") as f:
        f.write(MAGIC_DESCRIPTORS)
        f.write(struct.pack("<IBII", VERSION, _KIND_CODES[dset.kind], len(dset), dim))
        if dset.kind == KIND_SIFT:
            f.write(np.ascontiguousarray(dset.data, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(dset.data, dtype=np.uint8).tobytes())


def load_descriptors(path: str | Path) -> DescriptorSet:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, MAGIC_DESCRIPTORS, path)
        code, count, dim = struct.unpack("<BII", f.read(9))
        if code not in _KIND_NAMES:
            raise FormatError(f"{path}: unknown descriptor kind code {code}")
        kind = _KIND_NAMES[code]
        if kind == KIND_SIFT:
            if dim != SIFT_DIM:
                raise FormatError(f"{path}: SIFT dim {dim} != {SIFT_DIM}")
            data = np.frombuffer(f.read(count * dim * 4), dtype="<f4").reshape(count, dim)
            data = data.astype(np.float32)
        else:
            if dim != 512:
                raise FormatError(f"{path}: FREAK bit count {dim} != 512")
            data = np.frombuffer(f.read(count * FREAK_BYTES), dtype=np.uint8)
            data = data.reshape(count, FREAK_BYTES).copy()
        return DescriptorSet(kind, data)


# ----------------------------------------------------------------- codebook

def save_codebook(path: str | Path, cb: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_CODEBOOK)
        f.write(struct.pack("<IBIIQ", VERSION, _KIND_CODES[cb.kind], cb.size, cb.dim,
                            cb.seed & 0xFFFFFFFFFFFFFFFF))
        f.write(np.ascontiguousarray(cb.words, dtype="<f4").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, MAGIC_CODEBOOK, path)
        code, z, dim, seed = struct.unpack("<BIIQ", f.read(17))
        if code not in _KIND_NAMES:
            raise FormatError(f"{path}: unknown codebook kind code {code}")
        words = np.frombuffer(f.read(z * dim * 4), dtype="<f4").reshape(z, dim)
        return Codebook(_KIND_NAMES[code], words.astype(np.float32), int(seed))


# ----------------------------------------------------------- encoded corpus

def save_encoded(path: str | Path, z: int, labels: np.ndarray,
                 vectors: np.ndarray) -> None:
    labels = np.asarray(labels)
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.shape[1] != 2 * z:
        raise FormatError(f"encoded vectors must have 2Z={2 * z} columns")
    with open(path, "wb") as f:
        f.write(MAGIC_ENCODED)
        f.write(struct.pack("<III", VERSION, z, len(labels)))
        for label, row in zip(labels, vectors):
            f.write(struct.pack("<H", int(label)))
            f.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def load_encoded(path: str | Path) -> tuple[int, np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, MAGIC_ENCODED, path)
        z, count = struct.unpack("<II", f.read(8))
        labels = np.zeros(count, dtype=np.int64)
        vectors = np.zeros((count, 2 * z), dtype=np.float32)
        for i in range(count):
            (labels[i],) = struct.unpack("<H", f.read(2))
            vectors[i] = np.frombuffer(f.read(2 * z * 4), dtype="<f4")
        return z, labels, vectors


# -------------------------------------------------------------------- model

def save_model(path: str | Path, model: SvmModel) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_MODEL)
        f.write(struct.pack("<IIIf", VERSION, model.n_classes, model.dim, model.c_reg))
        for c in range(model.n_classes):
            f.write(struct.pack("<f", float(model.biases[c])))
            f.write(np.ascontiguousarray(model.weights[c], dtype="<f4").tobytes())


def load_model(path: str | Path) -> SvmModel:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, MAGIC_MODEL, path)
        n_classes, dim, c_reg = struct.unpack("<IIf", f.read(12))
        weights = np.zeros((n_classes, dim), dtype=np.float32)
        biases = np.zeros(n_classes, dtype=np.float32)
        for c in range(n_classes):
            (biases[c],) = struct.unpack("<f", f.read(4))
            weights[c] = np.frombuffer(f.read(dim * 4), dtype="<f4")
        return SvmModel(weights, biases, float(c_reg))


# ----------------------------------------------------------- text artifacts

def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    lines = [f"{ci}\t{manifest.classes[ci]}\t{rel}" for rel, ci in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, root: str | Path) -> DatasetManifest:
    path = Path(path)
    classes: list[str] = []
    entries: list[tuple[str, int]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            ci_str, name, rel = line.split("\t")
            ci = int(ci_str)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest line") from exc
        if ci == len(classes):
            classes.append(name)
        elif ci > len(classes) or classes[ci] != name:
            raise FormatError(f"{path}:{lineno}: class indices not dense/ordered")
        entries.append((rel, ci))
    if not classes:
        raise FormatError(f"{path}: empty manifest")
    return DatasetManifest(classes, entries, str(root))


def save_split(path: str | Path, plan: SplitPlan) -> None:
    lines = [f"seed={plan.seed} fraction={plan.train_fraction}"]
    lines.extend(f"train\t{i}" for i in plan.train)
    lines.extend(f"test\t{i}" for i in plan.test)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> SplitPlan:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("seed="):
        raise FormatError(f"{path}: missing split header")
    head = dict(part.split("=", 1) for part in lines[0].split())
    train: list[int] = []
    test: list[int] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        tag, idx = line.split("\t")
        if tag == "train":
            train.append(int(idx))
        elif tag == "test":
            test.append(int(idx))
        else:
            raise FormatError(f"{path}: bad split tag {tag!r}")
    return SplitPlan(int(head["seed"]), float(head["fraction"]), train, test)


# --------------------------------------------------------------- provenance

def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_provenance(artifact: str | Path, inputs: dict[str, str]) -> None:
    """Record input hashes next to an artifact as ``<artifact>.prov``."""
    lines = [f"{name}\t{digest}" for name, digest in sorted(inputs.items())]
    Path(str(artifact) + ".prov").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_provenance(artifact: str | Path) -> dict[str, str]:
    prov = Path(str(artifact) + ".prov")
    if not prov.exists():
        return {}
    out: dict[str, str] = {}
    for line in prov.read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, digest = line.split("\t")
            out[name] = digest
    return out


def check_provenance(artifact: str | Path, current: dict[str, str]) -> None:
    """Raise when any recorded input hash disagrees with ``current``."""
    recorded = read_provenance(artifact)
    for name, digest in recorded.items():
        if name in current and current[name] != digest:
            raise StaleArtifactError(
                f"{artifact} was built from a different {name}; rerun upstream stages")
