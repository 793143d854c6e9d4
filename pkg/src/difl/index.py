"""Descriptor database: pre-encoded reference features, per-slice PCA,
cosine / L2 nearest-neighbor search, and bit-exact persistence.

File layout (little-endian), version 1:

    magic "DIFX" | version u16 | metric u8 (0=cosine, 1=l2) |
    latent dim u32 | record count u32 |
    pca flag u8 [ n_models u32, per model:
        slice (u16 len + utf-8) | k u32 | d u32 | mean d*f32 | components k*d*f32 ] |
    per record (sorted by slice, then id):
        id (u16 len + utf-8) | slice (u16 len + utf-8) | values k_slice*f32 |
    crc32 u32 over everything before it
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bank import GeneratorBank
from .data import DatasetManifest, ImageRecord, load_image
from .errors import (DegenerateVectorError, EmptySliceError, IndexFormatError,
                     ShapeError, SliceNotFoundError)

log = logging.getLogger(__name__)

MAGIC = b"DIFX"
FORMAT_VERSION = 1
_METRIC_CODES = {"cosine": 0, "l2": 1}
_METRIC_NAMES = {v: k for k, v in _METRIC_CODES.items()}


@dataclass
class Descriptor:
    """Flattened latent vector of one database image."""

    values: np.ndarray
    image_id: str
    slice: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise DegenerateVectorError(f"descriptor {self.image_id} not finite")
        if float(np.linalg.norm(self.values)) == 0.0:
            raise DegenerateVectorError(f"descriptor {self.image_id} has zero norm")


@dataclass
class PcaModel:
    """Centering + orthonormal projection onto the top-k components."""

    mean: np.ndarray            # (d,)
    components: np.ndarray      # (k, d)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        self.components = np.asarray(self.components, dtype=np.float32)
        k, d = self.components.shape
        gram = self.components.astype(np.float64) @ self.components.astype(np.float64).T
        if not np.allclose(gram, np.eye(k), atol=1e-5):
            raise IndexFormatError("PCA components are not orthonormal")

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        centered = np.asarray(x, dtype=np.float64) - self.mean.astype(np.float64)
        return centered @ self.components.astype(np.float64).T


def fit_pca(vectors: np.ndarray, k: int) -> PcaModel:
    """PCA of database vectors; centers, does not whiten. ``k`` is clamped to
    the available rank (min of sample count and dimension) with a warning."""
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    max_k = min(n, d)
    if k > max_k:
        log.warning("PCA k=%d exceeds available rank %d; clamping", k, max_k)
        k = max_k
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    return PcaModel(mean=mean.astype(np.float32),
                    components=vt[:k].astype(np.float32))


@dataclass
class _SliceBlock:
    ids: list[str]
    vectors: np.ndarray  # (n, dim_slice) float32, rows aligned with ids


@dataclass
class FeatureIndex:
    metric: str
    latent_dim: int
    slices: dict[str, _SliceBlock] = field(default_factory=dict)
    pca: dict[str, PcaModel] | None = None

    def __post_init__(self):
        if self.metric not in _METRIC_CODES:
            raise IndexFormatError(f"unknown metric {self.metric!r}")

    @property
    def count(self) -> int:
        return sum(len(b.ids) for b in self.slices.values())

    def slice_dim(self, slice_name: str) -> int:
        if self.pca is not None and slice_name in self.pca:
            return self.pca[slice_name].k
        return self.latent_dim

    def pca_description(self) -> str:
        if self.pca is None:
            return "none"
        ks = sorted({m.k for m in self.pca.values()})
        return f"k={ks[0]}" if len(ks) == 1 else f"per-slice k in {ks}"


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); 0 for parallel, 1 for orthogonal, at most 2."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine distance undefined for zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def l2_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Euclidean distance."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(np.linalg.norm(u - v))


def flatten_feature(values: torch.Tensor) -> np.ndarray:
    """Channel-major, then row-major flattening; the persistence order."""
    return values.detach().reshape(-1).cpu().numpy().astype(np.float32)


def encode_descriptor(bank: GeneratorBank, record: ImageRecord) -> np.ndarray:
    from .trainer import preprocess

    image = preprocess(load_image(record.path), training=False,
                       eval_size=bank.config.input_size)
    feature = bank.encode(record.domain, image)
    return flatten_feature(feature.values)


def _encode_batched(bank: GeneratorBank, records: list[ImageRecord],
                    batch_size: int = 16) -> dict[str, np.ndarray]:
    """Encode records grouped by domain; returns id -> flat float32 vector."""
    from .trainer import preprocess

    out: dict[str, np.ndarray] = {}
    by_domain: dict[str, list[ImageRecord]] = {}
    for r in records:
        by_domain.setdefault(r.domain.name, []).append(r)
    for name in sorted(by_domain):
        recs = by_domain[name]
        encoder = bank.encoders[name]
        for start in range(0, len(recs), batch_size):
            chunk = recs[start:start + batch_size]
            batch = torch.stack([
                preprocess(load_image(r.path), training=False,
                           eval_size=bank.config.input_size)
                for r in chunk])
            with torch.no_grad():
                feats = encoder(batch)
            flat = feats.reshape(feats.shape[0], -1).cpu().numpy().astype(np.float32)
            for r, vec in zip(chunk, flat):
                out[r.id] = vec
    return out


def build_index_from_descriptors(descriptors: list[Descriptor], metric: str,
                                 pca_spec=None) -> FeatureIndex:
    """Group descriptors by slice, optionally fit per-slice PCA and project.

    ``pca_spec``: None for raw descriptors, "slice" for k = images in the
    slice, or an integer k applied to every slice.
    """
    if not descriptors:
        raise EmptySliceError("no descriptors to index")
    dims = {d.values.shape[0] for d in descriptors}
    if len(dims) != 1:
        raise ShapeError(f"descriptors have mixed lengths: {sorted(dims)}")
    latent_dim = dims.pop()

    grouped: dict[str, list[Descriptor]] = {}
    for d in descriptors:
        grouped.setdefault(d.slice, []).append(d)

    pca_models: dict[str, PcaModel] | None = None
    slices: dict[str, _SliceBlock] = {}
    for slice_name in sorted(grouped):
        descs = sorted(grouped[slice_name], key=lambda d: d.image_id)
        if not descs:
            raise EmptySliceError(f"slice {slice_name} is empty")
        ids = [d.image_id for d in descs]
        mat = np.stack([d.values for d in descs]).astype(np.float32)
        if pca_spec is not None:
            k = len(descs) if pca_spec == "slice" else int(pca_spec)
            if k < 1:
                raise EmptySliceError(f"PCA dimension {k} invalid")
            model = fit_pca(mat, k)
            mat = model.project(mat).astype(np.float32)
            pca_models = pca_models or {}
            pca_models[slice_name] = model
        slices[slice_name] = _SliceBlock(ids=ids, vectors=mat)
    return FeatureIndex(metric=metric, latent_dim=latent_dim, slices=slices,
                        pca=pca_models)


def build_index(bank: GeneratorBank, manifest: DatasetManifest,
                metric: str = "cosine", pca_spec=None,
                batch_size: int = 16) -> FeatureIndex:
    """Pre-encode every reference image with its own domain's encoder."""
    refs = manifest.references()
    if not refs:
        raise EmptySliceError("manifest has no reference records")
    vectors = _encode_batched(bank, refs, batch_size)
    descriptors = [Descriptor(values=vectors[r.id], image_id=r.id, slice=r.slice)
                   for r in refs]
    return build_index_from_descriptors(descriptors, metric, pca_spec)


def search(index: FeatureIndex, query: np.ndarray, slice_name: str,
           top_k: int = 1) -> list[tuple[str, float]]:
    """Scan one slice for the ``top_k`` nearest descriptors.

    ``query`` is a raw (pre-PCA) vector of ``latent_dim`` values; the slice's
    stored PCA, if any, is applied here. Ties break by ascending image id.
    """
    if slice_name not in index.slices:
        raise SliceNotFoundError(slice_name)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.latent_dim:
        raise ShapeError(f"query has dim {q.shape[0]}, index wants "
                         f"{index.latent_dim}")
    if index.pca is not None and slice_name in index.pca:
        q = index.pca[slice_name].project(q)
    block = index.slices[slice_name]
    mat = block.vectors.astype(np.float64)
    if index.metric == "cosine":
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise DegenerateVectorError("zero query vector under cosine metric")
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError("zero descriptor in index")
        dists = 1.0 - (mat @ q) / (norms * qn)
    else:
        dists = np.linalg.norm(mat - q, axis=1)
    # ids are stored ascending, so a stable sort on distance breaks ties by id
    order = np.argsort(dists, kind="stable")[:top_k]
    return [(block.ids[i], float(dists[i])) for i in order]


def retrieve(index: FeatureIndex, bank: GeneratorBank, query: ImageRecord,
             top_k: int = 1) -> list[tuple[str, float]]:
    """Encode a query image with its domain's encoder and search its slice."""
    return search(index, encode_descriptor(bank, query), query.slice, top_k)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise IndexFormatError(f"string too long to store: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IndexFormatError("truncated index file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def take_f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def save_index(index: FeatureIndex, path: str | Path) -> None:
    parts = [MAGIC,
             struct.pack("<H", FORMAT_VERSION),
             struct.pack("<B", _METRIC_CODES[index.metric]),
             struct.pack("<I", index.latent_dim),
             struct.pack("<I", index.count)]
    if index.pca is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<I", len(index.pca)))
        for slice_name in sorted(index.pca):
            model = index.pca[slice_name]
            k, d = model.components.shape
            parts.append(_pack_str(slice_name))
            parts.append(struct.pack("<II", k, d))
            parts.append(model.mean.astype("<f4").tobytes())
            parts.append(np.ascontiguousarray(model.components, dtype="<f4").tobytes())
    for slice_name in sorted(index.slices):
        block = index.slices[slice_name]
        for rec_id, vec in zip(block.ids, block.vectors):
            parts.append(_pack_str(rec_id))
            parts.append(_pack_str(slice_name))
            parts.append(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_index(path: str | Path) -> FeatureIndex:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise IndexFormatError("file too short to be a feature index")
    payload, crc_raw = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise IndexFormatError("CRC mismatch: index file is corrupt")

    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise IndexFormatError("bad magic: not a feature index file")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise IndexFormatError(
            f"unsupported index format version {version}, "
            f"expected {FORMAT_VERSION}")
    (metric_code,) = r.unpack("<B")
    if metric_code not in _METRIC_NAMES:
        raise IndexFormatError(f"unknown metric code {metric_code}")
    (latent_dim,) = r.unpack("<I")
    (count,) = r.unpack("<I")

    (pca_flag,) = r.unpack("<B")
    pca: dict[str, PcaModel] | None = None
    if pca_flag == 1:
        pca = {}
        (n_models,) = r.unpack("<I")
        for _ in range(n_models):
            slice_name = r.take_str()
            k, d = r.unpack("<II")
            mean = r.take_f32(d)
            components = r.take_f32(k * d).reshape(k, d)
            pca[slice_name] = PcaModel(mean=mean, components=components)
    elif pca_flag != 0:
        raise IndexFormatError(f"bad PCA flag byte {pca_flag}")

    slices: dict[str, _SliceBlock] = {}
    rows: dict[str, list[tuple[str, np.ndarray]]] = {}
    for _ in range(count):
        rec_id = r.take_str()
        slice_name = r.take_str()
        dim = pca[slice_name].k if pca and slice_name in pca else latent_dim
        vec = r.take_f32(dim)
        rows.setdefault(slice_name, []).append((rec_id, vec))
    if r.pos != len(payload):
        raise IndexFormatError("trailing bytes after last record")
    for slice_name, pairs in rows.items():
        slices[slice_name] = _SliceBlock(
            ids=[p[0] for p in pairs],
            vectors=np.stack([p[1] for p in pairs]).astype(np.float32))
    return FeatureIndex(metric=_METRIC_NAMES[metric_code],
                        latent_dim=latent_dim, slices=slices, pca=pca)
