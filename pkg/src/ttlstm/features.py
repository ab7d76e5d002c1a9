"""Structured time-series semantic features.

Each frame is an s x f x c tensor: s sub-scene rows, f learned features
per sub-scene, c confidence scores per sub-scene. The frozen in-memory
layout is the confidence-weighted slab product

    tensor[s_i, f_i, c_i] = feat[s_i, f_i] * conf[s_i, c_i]

with both factors in [0, 1], so every stored entry lies in [0, 1] (the
feature quantizer's domain). Rows past the actual detection count are
exactly zero. Frames with zero detections are skipped, never stored.

The binary feature-file format (little-endian):

    magic "S3FT" | version u16 | s u16 | f u16 | c u16 | num_sequences u32
    per sequence: label u16 | T u32
    per frame:    frame_index u32 | subscene_count u16 | s*f*c float32 (row-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from itertools import product as iter_product

import numpy as np

__all__ = [
    "CAP_SUBSCENES",
    "FeatureError",
    "FeatureFormatError",
    "FeatureDimensionError",
    "FeatureValueError",
    "SubsceneOverflowError",
    "FrameFeatures",
    "FeatureSequence",
    "DimFactorization",
    "SyntheticTaskSpec",
    "structure_frame",
    "truncate_detections",
    "factorize_dims",
    "save_sequences",
    "load_sequences",
    "generate_synthetic",
    "split_train_eval",
]

CAP_SUBSCENES = 25
FILE_MAGIC = b"S3FT"
FILE_VERSION = 1


class FeatureError(ValueError):
    """Base class for feature ingestion errors."""


class FeatureFormatError(FeatureError):
    """Malformed header, truncated payload, or trailing bytes."""


class FeatureDimensionError(FeatureError):
    """Dimensions inconsistent with the header or the sub-scene cap."""


class FeatureValueError(FeatureError):
    """Non-finite or out-of-range values, broken padding, bad frame order."""


class SubsceneOverflowError(FeatureError):
    """More detections than sub-scene rows; truncate by confidence first."""


@dataclass
class FrameFeatures:
    """One frame's structured features: (s, f, c) tensor plus provenance."""

    tensor: np.ndarray
    frame_index: int
    subscene_count: int

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3:
            raise FeatureDimensionError(
                f"frame tensor must be 3-way (s, f, c), got shape {self.tensor.shape}"
            )
        s = self.tensor.shape[0]
        if not 1 <= self.subscene_count <= s:
            raise FeatureValueError(
                f"subscene_count {self.subscene_count} outside [1, {s}]"
            )
        if self.frame_index < 0:
            raise FeatureValueError(f"negative frame index {self.frame_index}")
        if not np.all(np.isfinite(self.tensor)):
            raise FeatureValueError("frame tensor contains non-finite values")
        if self.tensor.min() < 0.0 or self.tensor.max() > 1.0:
            raise FeatureValueError("frame tensor entries must lie in [0, 1]")
        if self.subscene_count < s and np.any(self.tensor[self.subscene_count :]):
            raise FeatureValueError("padding rows past subscene_count must be zero")


@dataclass
class FeatureSequence:
    """Ordered frames with a class label and provenance metadata."""

    frames: list[FrameFeatures]
    label: int
    provenance: str = "ingested"
    source_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise FeatureValueError("a feature sequence cannot be empty")
        if self.label < 0:
            raise FeatureValueError(f"negative label {self.label}")
        if self.provenance not in ("ingested", "synthetic"):
            raise FeatureValueError(f"unknown provenance {self.provenance!r}")
        dims = self.frames[0].tensor.shape
        for fr in self.frames:
            if fr.tensor.shape != dims:
                raise FeatureDimensionError(
                    f"inconsistent frame dims {fr.tensor.shape} vs {dims}"
                )
        indices = [fr.frame_index for fr in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise FeatureValueError("frame indices must be strictly increasing")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.frames[0].tensor.shape

    def __len__(self) -> int:
        return len(self.frames)

    def to_matrix(self) -> np.ndarray:
        """(T, s*f*c) row-major flattening, the model's input layout."""
        return np.stack([fr.tensor.reshape(-1) for fr in self.frames])


def truncate_detections(features: np.ndarray, scores: np.ndarray, cap: int):
    """Keep the top ``cap`` detections by confidence (max score per row).

    Stable under ties; survivors keep their original detection order.
    """
    conf = np.asarray(scores).max(axis=1)
    order = np.argsort(-conf, kind="stable")[:cap]
    keep = np.sort(order)
    return np.asarray(features)[keep], np.asarray(scores)[keep]


def structure_frame(
    features: np.ndarray,
    scores: np.ndarray,
    s: int,
    f: int,
    c: int,
    frame_index: int,
) -> FrameFeatures | None:
    """Build one frame tensor from per-detection rows; None means skip.

    ``features`` is (k, f) and ``scores`` is (k, c) for k detections.
    Zero detections return the skip marker (the frame is omitted from the
    sequence). More than s detections raise; the caller truncates by
    confidence first (:func:`truncate_detections`).
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, f)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, c)
    k = features.shape[0]
    if scores.shape[0] != k:
        raise FeatureDimensionError(
            f"{k} feature rows but {scores.shape[0]} score rows"
        )
    if k == 0:
        return None
    if k > s:
        raise SubsceneOverflowError(f"{k} detections exceed the {s} sub-scene rows")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(scores))):
        raise FeatureValueError("detections contain non-finite values")
    if features.min() < 0.0 or features.max() > 1.0:
        raise FeatureValueError("feature values must lie in [0, 1]")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise FeatureValueError("confidence scores must lie in [0, 1]")
    tensor = np.zeros((s, f, c))
    tensor[:k] = np.einsum("kf,kc->kfc", features, scores)
    return FrameFeatures(tensor=tensor, frame_index=frame_index, subscene_count=k)


@dataclass
class DimFactorization:
    """Flat input size and its d-mode factorization; degraded means a
    factor of 1 could not be avoided."""

    flat_size: int
    factors: tuple[int, ...]
    degraded: bool = False

    def __post_init__(self):
        if math.prod(self.factors) != self.flat_size:
            raise FeatureDimensionError(
                f"factors {self.factors} do not multiply to {self.flat_size}"
            )


def _ordered_factorizations(n: int, parts: int, minimum: int = 2):
    """All ordered tuples of ``parts`` integers >= minimum with product n."""
    if parts == 1:
        if n >= minimum:
            yield (n,)
        return
    for a in range(minimum, n + 1):
        if n % a == 0:
            for rest in _ordered_factorizations(n // a, parts - 1, minimum):
                yield (a,) + rest


def _compositions(total: int, parts: int):
    """All ways to write total as an ordered sum of ``parts`` positive ints."""
    if parts == 1:
        yield (total,)
        return
    for head in range(1, total - parts + 2):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def factorize_dims(dims, d: int) -> DimFactorization:
    """Factor a feature shape into d modes, preferring the original axes.

    Axis-preserving candidates split each original axis in place into
    contiguous factors >= 2, non-increasing within the split; among them
    the one minimizing the largest factor wins (ties: ascending
    lexicographic). If no axis-preserving candidate exists, a balanced
    ordered factorization of the flat size is searched exhaustively with
    the same objective. If even that fails, the original dims padded with
    trailing 1s are returned with the degraded flag set.
    """
    dims = tuple(int(x) for x in dims)
    if d < 1 or any(x < 1 for x in dims):
        raise FeatureDimensionError(f"invalid dims {dims} or d={d}")
    flat = math.prod(dims)

    candidates: list[tuple[int, ...]] = []
    if len(dims) <= d:
        for comp in _compositions(d, len(dims)):
            per_axis = []
            for axis, parts in zip(dims, comp):
                splits = [
                    t
                    for t in _ordered_factorizations(axis, parts)
                    if all(a >= b for a, b in zip(t, t[1:]))
                ]
                per_axis.append(splits)
            if all(per_axis):
                for combo in iter_product(*per_axis):
                    candidates.append(tuple(x for grp in combo for x in grp))
    if not candidates:
        candidates = list(_ordered_factorizations(flat, d))
    if not candidates:
        factors = dims + (1,) * (d - len(dims))
        if len(factors) > d:
            head = factors[: d - 1]
            factors = head + (flat // math.prod(head),)
        return DimFactorization(flat_size=flat, factors=factors, degraded=True)
    best = min(candidates, key=lambda t: (max(t), t))
    return DimFactorization(flat_size=flat, factors=best, degraded=False)


def save_sequences(path, sequences: list[FeatureSequence]) -> None:
    """Write sequences in the S3FT binary format (see module docstring)."""
    if not sequences:
        raise FeatureValueError("refusing to write an empty sequence list")
    s, f, c = sequences[0].dims
    for seq in sequences:
        if seq.dims != (s, f, c):
            raise FeatureDimensionError(
                f"all sequences must share dims; got {seq.dims} vs {(s, f, c)}"
            )
    out = bytearray()
    out += FILE_MAGIC
    out += struct.pack("<HHHHI", FILE_VERSION, s, f, c, len(sequences))
    for seq in sequences:
        out += struct.pack("<HI", seq.label, len(seq.frames))
        for fr in seq.frames:
            out += struct.pack("<IH", fr.frame_index, fr.subscene_count)
            out += fr.tensor.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FeatureFormatError("truncated feature file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_sequences(path, allow_large_s: bool = False) -> list[FeatureSequence]:
    """Parse and validate an S3FT feature file.

    Rejects bad magic/version (format error), dimension mismatches
    including s over the cap of 25 unless ``allow_large_s`` (dimension
    error), and non-finite / out-of-range values, broken zero padding or
    non-increasing frame indices (value errors). Nothing is returned on
    failure; there are no partial results.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != FILE_MAGIC:
        raise FeatureFormatError("bad magic bytes, not a feature file")
    version, s, f, c, num_sequences = r.unpack("<HHHHI")
    if version != FILE_VERSION:
        raise FeatureFormatError(f"unsupported feature file version {version}")
    if s < 1 or f < 1 or c < 1:
        raise FeatureDimensionError(f"invalid dims s={s} f={f} c={c}")
    if s > CAP_SUBSCENES and not allow_large_s:
        raise FeatureDimensionError(
            f"s={s} exceeds the sub-scene cap {CAP_SUBSCENES}"
        )
    frame_floats = s * f * c
    sequences = []
    source = str(path)
    for _ in range(num_sequences):
        label, n_frames = r.unpack("<HI")
        if n_frames < 1:
            raise FeatureValueError("sequence with zero frames")
        frames = []
        for _ in range(n_frames):
            frame_index, count = r.unpack("<IH")
            raw = np.frombuffer(r.take(4 * frame_floats), dtype="<f4")
            tensor = raw.astype(np.float64).reshape(s, f, c)
            if count == 0:
                raise FeatureValueError(
                    "frame with zero sub-scenes stored (skip rule violated)"
                )
            try:
                frames.append(
                    FrameFeatures(
                        tensor=tensor, frame_index=frame_index, subscene_count=count
                    )
                )
            except FeatureError:
                raise
        sequences.append(
            FeatureSequence(
                frames=frames, label=label, provenance="ingested", source_id=source
            )
        )
    if r.pos != len(data):
        raise FeatureFormatError(f"{len(data) - r.pos} trailing bytes after payload")
    return sequences


@dataclass
class SyntheticTaskSpec:
    """Parameters of the synthetic temporal classification task.

    Class identity is carried only by the per-step phase increment of
    travelling waves written into the feature rows:

        feat[t, s_i, f_i] = 0.5 + amplitude * sin(step_y * t + phi_{s_i}
                            + pi * f_i / f) + noise

    with step_y = pi * (2y + 1) / (2 * num_classes) for class y and
    phi_{s_i} uniform per sub-scene per sequence. Because the phases are
    uniform, the within-frame joint distribution is identical for every
    class: the Bayes-optimal single-frame accuracy is exactly chance
    (25% for 4 classes), so any single-frame classifier caps far below
    60% by construction. Class information is recoverable only from
    consecutive frames (the wave's travel speed); shuffling the frames
    destroys it. Faster classes also move the (s, f, c)-mean centroid
    faster: mean per-step centroid speed scales with sin(step_y / 2),
    giving adjacent classes a speed ratio of at least ~1.4 (measured in
    the generator's test suite).

    Confidence scores are drawn once per sequence per sub-scene from
    [0.5, 1.0) and held constant over time, so they carry no class signal.
    """

    num_classes: int = 4
    s: int = 5
    f: int = 17
    c: int = 4
    seq_len: int = 16
    sequences_per_class: int = 100
    seed: int = 0
    amplitude: float = 0.4
    noise: float = 0.02

    def class_phase_step(self, label: int) -> float:
        return math.pi * (2 * label + 1) / (2 * self.num_classes)


def generate_synthetic(spec: SyntheticTaskSpec) -> list[FeatureSequence]:
    """Emit the class-conditional travelling-wave dataset, deterministically.

    Sequence i (labels cycle i mod num_classes) is generated from its own
    RNG stream keyed by (seed, i), so the dataset is byte-identical for a
    fixed seed regardless of chunking or parallelism.
    """
    if spec.num_classes < 2:
        raise FeatureValueError("need at least 2 classes")
    if spec.s > CAP_SUBSCENES:
        raise FeatureDimensionError(
            f"s={spec.s} exceeds the sub-scene cap {CAP_SUBSCENES}"
        )
    total = spec.num_classes * spec.sequences_per_class
    wave_offsets = math.pi * np.arange(spec.f) / spec.f
    sequences = []
    for i in range(total):
        label = i % spec.num_classes
        rng = np.random.default_rng([spec.seed, i])
        phases = rng.uniform(0.0, 2.0 * math.pi, size=spec.s)
        conf = rng.uniform(0.5, 1.0, size=(spec.s, spec.c))
        step = spec.class_phase_step(label)
        frames = []
        for t in range(spec.seq_len):
            angle = step * t + phases[:, None] + wave_offsets[None, :]
            feat = 0.5 + spec.amplitude * np.sin(angle)
            feat = feat + rng.normal(0.0, spec.noise, size=feat.shape)
            feat = np.clip(feat, 0.0, 1.0)
            tensor = np.einsum("sf,sc->sfc", feat, conf)
            frames.append(
                FrameFeatures(tensor=tensor, frame_index=t, subscene_count=spec.s)
            )
        sequences.append(
            FeatureSequence(
                frames=frames,
                label=label,
                provenance="synthetic",
                source_id=f"seed={spec.seed}/seq={i}",
            )
        )
    return sequences


def split_train_eval(sequences, eval_fraction: float = 0.2):
    """Deterministic stratified split: last fraction of each class to eval."""
    if not 0.0 < eval_fraction < 1.0:
        raise FeatureValueError(f"eval fraction {eval_fraction} outside (0, 1)")
    by_label: dict[int, list[int]] = {}
    for idx, seq in enumerate(sequences):
        by_label.setdefault(seq.label, []).append(idx)
    eval_idx = set()
    for idxs in by_label.values():
        n_eval = max(1, math.ceil(eval_fraction * len(idxs)))
        eval_idx.update(idxs[-n_eval:])
    train = [s for i, s in enumerate(sequences) if i not in eval_idx]
    evals = [s for i, s in enumerate(sequences) if i in eval_idx]
    return train, evals
