"""Embedding backends and the binary embedding-store format."""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .dataset import bilinear_resize
from .errors import BackendError, BadMagicError, ChecksumError, StoreFormatError, TruncatedFileError

REFERENCE_SIZE = (224, 224)
REFERENCE_GRID = (16, 16)
REFERENCE_DIM = REFERENCE_GRID[0] * REFERENCE_GRID[1] + 4

# per-channel RGB constants the pretrained ViT backbones were trained with
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    embedding_dim: int
    kind: str  # "reference" or "external-model-file"
    thread_safe: bool = True

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.kind not in ("reference", "external-model-file"):
            raise ValueError(f"unknown backend kind {self.kind!r}")


class Backend(Protocol):
    descriptor: BackendDescriptor

    def embed(self, image: np.ndarray) -> np.ndarray: ...


def compose_embedding(class_token, patch_tokens) -> np.ndarray:
    """Class token followed by the row-major flattened patch tokens."""
    cls = np.asarray(class_token)
    patches = np.asarray(patch_tokens)
    if cls.ndim != 1:
        raise ValueError(f"class token must be a vector, got shape {cls.shape}")
    if patches.size == 0:
        patches = patches.reshape(0, cls.shape[0])
    if patches.ndim != 2 or patches.shape[1] != cls.shape[0]:
        raise ValueError(
            f"patch tokens of shape {patches.shape} do not match class token dimension {cls.shape[0]}"
        )
    return np.concatenate([cls, patches.reshape(-1)])


def reference_embed(image: np.ndarray) -> np.ndarray:
    """Deterministic 260-dim stand-in for a pretrained backbone.

    Layout: standardized 16x16 bilinear thumbnail (256), global mean,
    global std, mean squared horizontal and vertical forward differences.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != REFERENCE_SIZE:
        raise BackendError(f"reference backend expects a {REFERENCE_SIZE} raster, got {img.shape}")
    thumb = bilinear_resize(img, REFERENCE_GRID).ravel()
    sd = thumb.std()
    block = (thumb - thumb.mean()) / sd if sd > 0 else np.zeros_like(thumb)
    dh = np.mean(np.diff(img, axis=1) ** 2)
    dv = np.mean(np.diff(img, axis=0) ** 2)
    return np.concatenate([block, [img.mean(), img.std(), dh, dv]])


class ReferenceBackend:
    descriptor = BackendDescriptor("reference", REFERENCE_DIM, "reference")

    def embed(self, image: np.ndarray) -> np.ndarray:
        return reference_embed(image)


class OnnxBackend:
    """Serialized ViT exported to ONNX.

    The model takes a (1, 3, H, W) float32 tensor and its first output (or
    ``output_name``) holds the final-layer tokens as (1, 1 + N_p, D), class
    token first. Grayscale input is replicated to three channels and
    normalized with the ImageNet constants.
    """

    def __init__(self, model_path, output_name: Optional[str] = None, threads: int = 1):
        try:
            import onnxruntime as ort
        except ImportError:
            raise BackendError("the onnx backend needs the 'onnxruntime' package") from None
        path = Path(model_path)
        if not path.is_file():
            raise BackendError(f"model file not found: {path}")
        opts = ort.SessionOptions()
        opts.intra_op_num_threads = max(1, threads)
        opts.inter_op_num_threads = 1
        try:
            self._session = ort.InferenceSession(str(path), sess_options=opts, providers=["CPUExecutionProvider"])
        except Exception as exc:  # onnxruntime raises its own exception zoo
            raise BackendError(f"cannot load model {path}: {exc}") from None
        self._input = self._session.get_inputs()[0].name
        outputs = [o.name for o in self._session.get_outputs()]
        if output_name is not None and output_name not in outputs:
            raise BackendError(f"model has no output {output_name!r} (outputs: {outputs})")
        self._output = output_name or outputs[0]
        shape = self._session.get_inputs()[0].shape
        h = shape[2] if isinstance(shape[2], int) else REFERENCE_SIZE[0]
        w = shape[3] if isinstance(shape[3], int) else REFERENCE_SIZE[1]
        self.input_size = (h, w)
        dim = self._tokens_to_vector(self._run(np.zeros(self.input_size))).shape[0]
        self.descriptor = BackendDescriptor(path.stem, dim, "external-model-file")

    def _run(self, image: np.ndarray) -> np.ndarray:
        x = np.repeat(np.asarray(image, dtype=np.float32)[None, :, :], 3, axis=0)
        x = (x - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]
        try:
            (out,) = self._session.run([self._output], {self._input: x[None]})
        except Exception as exc:
            raise BackendError(f"inference failed: {exc}") from None
        return out

    @staticmethod
    def _tokens_to_vector(out: np.ndarray) -> np.ndarray:
        tokens = np.asarray(out)
        if tokens.ndim == 3:
            tokens = tokens[0]
        if tokens.ndim != 2:
            raise BackendError(f"expected token output (1, 1+N_p, D), got shape {np.shape(out)}")
        return compose_embedding(tokens[0], tokens[1:])

    def embed(self, image: np.ndarray) -> np.ndarray:
        if np.shape(image) != self.input_size:
            raise BackendError(f"model expects {self.input_size} rasters, got {np.shape(image)}")
        vec = self._tokens_to_vector(self._run(image))
        if vec.shape[0] != self.descriptor.embedding_dim:
            raise BackendError(
                f"embedding length {vec.shape[0]} disagrees with descriptor dim {self.descriptor.embedding_dim}"
            )
        return vec


def make_backend(name: str = "reference", model_path=None, output_name=None, threads: int = 1):
    if name == "reference":
        return ReferenceBackend()
    if name == "onnx":
        if model_path is None:
            raise BackendError("the onnx backend needs embed.model_path")
        return OnnxBackend(model_path, output_name=output_name, threads=threads)
    raise BackendError(f"unknown backend {name!r} (expected 'reference' or 'onnx')")


@dataclass
class EmbeddingStore:
    data: np.ndarray  # (count, dim) float32
    labels: Optional[np.ndarray] = None
    backend_name: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"store data must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            bad = np.flatnonzero(~np.all(np.isfinite(self.data), axis=1))
            raise ValueError(f"non-finite embedding rows: {bad[:10].tolist()}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.count,):
                raise ValueError(f"expected {self.count} labels, got {self.labels.shape}")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, rows) -> "EmbeddingStore":
        rows = np.asarray(rows, dtype=np.intp)
        labels = None if self.labels is None else self.labels[rows]
        return EmbeddingStore(self.data[rows], labels, self.backend_name)


def embed_batch(images: Sequence[np.ndarray], backend, labels=None, threads: int = 1) -> EmbeddingStore:
    """Embed ``images`` in order. Work fans out over threads only when the
    backend declares itself thread safe."""
    dim = backend.descriptor.embedding_dim
    if threads > 1 and backend.descriptor.thread_safe and len(images) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(backend.embed, images))
    else:
        rows = [backend.embed(im) for im in images]
    for i, r in enumerate(rows):
        if r.shape != (dim,):
            raise BackendError(f"image {i}: backend returned shape {r.shape}, descriptor says ({dim},)")
    data = np.stack(rows) if rows else np.zeros((0, dim))
    return EmbeddingStore(data, labels, backend.descriptor.name)


# ---------------------------------------------------------------------------
# binary format

STORE_MAGIC = b"EMBS"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHIIB")


def save_store(store: EmbeddingStore, path) -> None:
    flags = 1 if store.has_labels else 0
    parts = [
        _STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.count, store.dim, flags),
        store.data.astype("<f4", copy=False).tobytes(order="C"),
    ]
    if store.has_labels:
        if store.count and (store.labels.min() < 0 or store.labels.max() > 0xFFFFFFFF):
            raise StoreFormatError("labels must fit in u32")
        parts.append(store.labels.astype("<u4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_store(path, backend_name: str = "") -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != STORE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {STORE_MAGIC!r}")
    if len(raw) < _STORE_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, count, dim, flags = _STORE_HEADER.unpack_from(raw)
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    has_labels = bool(flags & 1)
    payload = count * dim * 4
    expected = _STORE_HEADER.size + payload + (count * 4 if has_labels else 0) + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: truncated, {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise StoreFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if zlib.crc32(raw[: expected - 4]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    off = _STORE_HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=count, offset=off + payload).astype(np.int64)
    return EmbeddingStore(data.astype(np.float32), labels, backend_name)
