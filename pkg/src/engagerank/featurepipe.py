"""Feature preparation, dataset IO, and synthetic data generation.

Raw inputs are per-frame feature sequences plus a fixed-length global video
feature (and, optionally, a speech embedding with acoustic metadata).  This
module turns frame sequences into the chunked min/max/variance summaries the
scoring model consumes, reads and writes the JSON-lines dataset format, and
synthesizes imbalanced ordinal datasets for desk-scale experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional, Sequence

import numpy as np

SCHEMA_NAME = "cmose-features/1"
SPEECH_DIM = 768
AUDIO_META_DIM = 7
DEFAULT_MIN_FRAMES = 250
DEFAULT_CHUNKS = 10
DEFAULT_CHANNELS = 17
DEFAULT_GLOBAL_DIM = 64

#: Class proportions of the reference corpus, usable as synthetic-generator
#: weights (highly disengaged, disengaged, engaged, highly engaged).
REFERENCE_PROPORTIONS = (346, 2208, 8469, 1170)


class EngagementLevel(IntEnum):
    """Ordinal engagement classes; integer codes preserve the total order."""

    HIGHLY_DISENGAGED = 0
    DISENGAGED = 1
    ENGAGED = 2
    HIGHLY_ENGAGED = 3


N_CLASSES = 4


@dataclass
class FrameSequence:
    """A matrix of D feature channels by F frames."""

    values: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("frame values must be a 2-D (channels x frames) array")
        if self.values.shape[1] < 1 or self.values.shape[0] < 1:
            raise ValueError("empty input")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("frame values must be finite")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ChunkedFeatures:
    """Chunk summaries stacked as [min block; max block; variance block], 3D x T."""

    values: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.values.shape[0] // 3

    @property
    def n_chunks(self) -> int:
        return self.values.shape[1]


@dataclass
class SampleRecord:
    """One video segment: precomputed features plus an ordinal label."""

    id: str
    frames: FrameSequence
    global_feature: np.ndarray
    label: int
    speech_embedding: Optional[np.ndarray] = None
    audio_meta: Optional[np.ndarray] = None
    latent: Optional[float] = None

    def __post_init__(self):
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        if self.global_feature.ndim != 1:
            raise ValueError("global_feature must be a vector")
        if int(self.label) not in (0, 1, 2, 3):
            raise ValueError(f"label must be in 0..3, got {self.label!r}")
        self.label = int(self.label)
        if (self.speech_embedding is None) != (self.audio_meta is None):
            raise ValueError("modality fields must co-occur")
        if self.speech_embedding is not None:
            self.speech_embedding = np.asarray(self.speech_embedding, dtype=np.float64)
            self.audio_meta = np.asarray(self.audio_meta, dtype=np.float64)
            _validate_audio_meta(self.audio_meta)

    @property
    def has_speech(self) -> bool:
        return self.speech_embedding is not None


def _validate_audio_meta(meta: np.ndarray) -> None:
    if meta.shape != (AUDIO_META_DIM,):
        raise ValueError(f"audio_meta must have {AUDIO_META_DIM} entries")
    length, rates, stds = meta[0], meta[1:5], meta[5:7]
    if length < 0:
        raise ValueError("audio_meta speech length must be >= 0")
    if np.any(rates < 0) or np.any(rates > 1):
        raise ValueError("audio_meta rate fields must lie in [0, 1]")
    if np.any(stds < 0):
        raise ValueError("audio_meta std fields must be >= 0")


@dataclass
class Dataset:
    """An ordered collection of records with a split tag."""

    records: list[SampleRecord]
    split: str = "train"
    n_channels: int = DEFAULT_CHANNELS
    global_dim: int = DEFAULT_GLOBAL_DIM

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels(), minlength=N_CLASSES)

    def speech_indices(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.has_speech], dtype=np.int64)


# ---------------------------------------------------------------------------
# Frame-sequence preparation
# ---------------------------------------------------------------------------

def repeat_pad(frames: FrameSequence, min_frames: int = DEFAULT_MIN_FRAMES,
               strict: bool = False) -> FrameSequence:
    """Repeat a short sequence whole until it reaches the frame floor.

    By default a sequence with F >= min_frames passes through unchanged and a
    shorter one is tiled ceil(min_frames / F) times.  With ``strict=True`` the
    floor is exclusive, so a sequence of exactly ``min_frames`` frames is
    doubled.
    """
    f = frames.n_frames
    if f < 1:
        raise ValueError("empty input")
    if strict:
        copies = f // min_frames + 1 if f <= min_frames else 1
    else:
        copies = math.ceil(min_frames / f) if f < min_frames else 1
    if copies == 1:
        return frames
    return FrameSequence(np.tile(frames.values, (1, copies)), frames.frame_rate)


def chunk_summarize(frames: FrameSequence, n_chunks: int = DEFAULT_CHUNKS) -> ChunkedFeatures:
    """Split frames into contiguous chunks and emit per-chunk min/max/variance.

    The F frames are partitioned into ``n_chunks`` contiguous chunks whose
    lengths differ by at most one; the first ``F mod n_chunks`` chunks take the
    extra frame.  Variance is the population variance (ddof=0), which is
    defined even for single-frame chunks.
    """
    if n_chunks <= 0:
        raise ValueError("chunk count must be positive")
    f = frames.n_frames
    if n_chunks > f:
        raise ValueError("too few frames")
    d = frames.n_channels
    base, extra = divmod(f, n_chunks)
    out = np.empty((3 * d, n_chunks), dtype=np.float64)
    start = 0
    for t in range(n_chunks):
        size = base + (1 if t < extra else 0)
        chunk = frames.values[:, start:start + size]
        out[:d, t] = chunk.min(axis=1)
        out[d:2 * d, t] = chunk.max(axis=1)
        out[2 * d:, t] = chunk.var(axis=1)
        start += size
    return ChunkedFeatures(out)


def prepare_record(record: SampleRecord, n_chunks: int = DEFAULT_CHUNKS,
                   min_frames: int = DEFAULT_MIN_FRAMES, strict: bool = False) -> ChunkedFeatures:
    """Pad then chunk-summarize one record's frame sequence."""
    return chunk_summarize(repeat_pad(record.frames, min_frames, strict), n_chunks)


# ---------------------------------------------------------------------------
# JSON-lines dataset format
# ---------------------------------------------------------------------------
#
# Line 1 is a header object {"schema": "cmose-features/1", "D": ..., "d": ...};
# every following line is one record with keys id, frames (F arrays of D
# numbers), global_feature (d numbers), optional speech_embedding (768
# numbers), optional audio_meta (7 numbers), label (0-3), optional latent.

def load_records(path, split: str = "train") -> Dataset:
    """Read a JSON-lines dataset file, validating every record."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, missing header line")
    header = _parse_json_line(path, 1, lines[0])
    if header.get("schema") != SCHEMA_NAME:
        raise ValueError(
            f"{path}: line 1: unsupported schema {header.get('schema')!r}, "
            f"expected {SCHEMA_NAME!r}")
    n_channels = int(header["D"])
    global_dim = int(header["d"])
    # optional header override for scaled-down speech embeddings
    speech_dim = int(header.get("speech_dim", SPEECH_DIM))

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _parse_json_line(path, lineno, line)
        records.append(_record_from_json(path, lineno, obj, n_channels, global_dim,
                                         speech_dim))
    return Dataset(records, split=split, n_channels=n_channels, global_dim=global_dim)


def _parse_json_line(path, lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: line {lineno}: expected a JSON object")
    return obj


def _record_from_json(path, lineno: int, obj: dict, n_channels: int,
                      global_dim: int, speech_dim: int = SPEECH_DIM) -> SampleRecord:
    for key in ("id", "frames", "global_feature", "label"):
        if key not in obj:
            raise ValueError(f"{path}: line {lineno}: missing field {key!r}")
    frames = np.asarray(obj["frames"], dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"{path}: line {lineno}: field 'frames' must be a list of frame rows")
    # Rows in the file are per-frame; in memory channels index rows.
    frames = frames.T
    if frames.shape[0] != n_channels:
        raise ValueError(
            f"{path}: line {lineno}: field 'frames' has {frames.shape[0]} channels, "
            f"header says D={n_channels}")
    gfeat = np.asarray(obj["global_feature"], dtype=np.float64)
    if gfeat.shape != (global_dim,):
        raise ValueError(
            f"{path}: line {lineno}: field 'global_feature' has length {gfeat.size}, "
            f"header says d={global_dim}")
    speech = obj.get("speech_embedding")
    meta = obj.get("audio_meta")
    if (speech is None) != (meta is None):
        raise ValueError(f"{path}: line {lineno}: modality fields must co-occur")
    if speech is not None:
        speech = np.asarray(speech, dtype=np.float64)
        if speech.shape != (speech_dim,):
            raise ValueError(
                f"{path}: line {lineno}: field 'speech_embedding' must have "
                f"{speech_dim} entries")
        meta = np.asarray(meta, dtype=np.float64)
        if meta.shape != (AUDIO_META_DIM,):
            raise ValueError(
                f"{path}: line {lineno}: field 'audio_meta' must have "
                f"{AUDIO_META_DIM} entries")
    try:
        return SampleRecord(
            id=str(obj["id"]),
            frames=FrameSequence(frames),
            global_feature=gfeat,
            label=obj["label"],
            speech_embedding=speech,
            audio_meta=meta,
            latent=None if obj.get("latent") is None else float(obj["latent"]),
        )
    except ValueError as exc:
        raise ValueError(f"{path}: line {lineno}: {exc}") from exc


def save_records(dataset: Dataset, path) -> None:
    """Write a dataset in the JSON-lines format that load_records reads."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": SCHEMA_NAME, "D": dataset.n_channels, "d": dataset.global_dim}
        dims = {r.speech_embedding.shape[0] for r in dataset.records if r.has_speech}
        if dims and dims != {SPEECH_DIM}:
            if len(dims) > 1:
                raise ValueError("records disagree on speech embedding width")
            header["speech_dim"] = int(dims.pop())
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records:
            obj = {
                "id": rec.id,
                "frames": rec.frames.values.T.tolist(),
                "global_feature": rec.global_feature.tolist(),
                "label": int(rec.label),
            }
            if rec.has_speech:
                obj["speech_embedding"] = rec.speech_embedding.tolist()
                obj["audio_meta"] = rec.audio_meta.tolist()
            if rec.latent is not None:
                obj["latent"] = rec.latent
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Synthetic ordinal datasets
# ---------------------------------------------------------------------------

LATENT_EDGES = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])


def apportion(proportions: Sequence[float], n: int) -> np.ndarray:
    """Round class proportions to integer counts summing to n (largest remainder)."""
    props = np.asarray(proportions, dtype=np.float64)
    if props.size != N_CLASSES or np.any(props < 0) or props.sum() <= 0:
        raise ValueError("proportions must be four non-negative numbers with positive sum")
    ideal = props / props.sum() * n
    counts = np.floor(ideal).astype(np.int64)
    remainder = ideal - counts
    # Ties broken by class index, lowest first.
    order = np.lexsort((np.arange(N_CLASSES), -remainder))
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return counts


def synth_dataset(n: int, n_channels: int = DEFAULT_CHANNELS, global_dim: int = DEFAULT_GLOBAL_DIM,
                  n_frames: int = 300, proportions: Sequence[float] = REFERENCE_PROPORTIONS,
                  noise: float = 0.1, seed: int = 0, split: str = "train",
                  speech_fraction: float = 0.0, speech_dim: int = SPEECH_DIM,
                  saturation: float = 0.0, modulation: float = 0.0,
                  warp: float = 0.0, label_flip: float = 0.0) -> Dataset:
    """Generate an imbalanced ordinal dataset from a scalar latent.

    Each record draws a latent engagement scalar u uniformly inside its
    class band ([-1,-0.5), [-0.5,0), [0,0.5), [0.5,1]); the label is the band
    of u and u is kept in the record's ``latent`` debug field.  Frame features
    and the global feature are fixed random linear maps of a feature driver v
    plus Gaussian noise of scale ``noise`` (frames get a weaker map, so the
    global feature carries most of the signal).  ``speech_fraction`` > 0
    additionally equips that fraction of records (uniformly at random) with a
    synthetic speech embedding and audio metadata driven by the same latent.

    Three hardness knobs reshape the latent-to-feature map; all default to
    off, leaving the map linear.

    ``saturation`` a > 0 compresses the scale ends, v = tanh(a u) / tanh(a),
    the ceiling/floor effect of bounded ratings: the extreme bands then
    overlap their neighbors in feature space far more than the middle bands.

    ``modulation`` in [0, 1) mutes each record's expressive signal by a
    per-record gain drawn from [1-modulation, 1]: the same underlying state
    shows up at very different intensities, as expressiveness varies between
    subjects.  The last eighth of the global feature reports the gain itself,
    so the state stays identifiable but only through a multiplicative
    correction.

    ``warp`` w > 0 replaces each feature dimension's linear response with a
    sinusoid sin(pi w q v + phase) of random frequency q in [1, 2): jointly
    the feature vector still pins the latent down, but no single dimension is
    monotone in it any more.

    ``label_flip`` p > 0 reproduces rater disagreement: after features are
    generated from the true band, each record's label moves one class in a
    random direction with probability p, clipped at the scale ends (so
    extreme classes are only ever mis-rated inward).  Features and the
    ``latent`` debug field stay true, so ``latent_band`` recovers the
    uncorrupted class.

    Deterministic given ``seed``: the linear maps are drawn once, then records
    are generated in order.
    """
    proportions = np.asarray(proportions, dtype=np.float64)
    if np.any(proportions < 0) or proportions.sum() <= 0:
        raise ValueError("proportions must be non-negative with positive sum")
    if n < np.count_nonzero(proportions):
        raise ValueError("need at least one record per class when all proportions positive")
    counts = apportion(proportions, n)
    rng = np.random.default_rng(seed)

    # Fixed maps from the latent to each modality.  Frames are given a weaker
    # map than the global feature so the two branches differ in usefulness.
    frame_map = 0.5 * rng.standard_normal(n_channels)
    global_map = rng.standard_normal(global_dim)
    speech_map = rng.standard_normal(speech_dim)

    if saturation < 0:
        raise ValueError("saturation must be non-negative")
    if not 0.0 <= modulation < 1.0:
        raise ValueError("modulation must be in [0, 1)")
    if warp < 0:
        raise ValueError("warp must be non-negative")
    if not 0.0 <= label_flip < 1.0:
        raise ValueError("label_flip must be in [0, 1)")
    labels = np.repeat(np.arange(N_CLASSES), counts)
    rng.shuffle(labels)
    lo = LATENT_EDGES[labels]
    hi = LATENT_EDGES[labels + 1]
    latents = lo + rng.random(n) * (hi - lo)
    drivers = (np.tanh(saturation * latents) / np.tanh(saturation)
               if saturation > 0 else latents)

    # Per-knob extras draw from the stream only when active, so default-off
    # datasets are bitwise identical to those from earlier revisions.
    gains = None
    n_ctx = 0
    if modulation > 0:
        gains = 1.0 - modulation * rng.random(n)
        n_ctx = max(1, global_dim // 8)
    fwarp = gwarp = swarp = None
    if warp > 0:
        gwarp = (1.0 + rng.random(global_dim), 2 * np.pi * rng.random(global_dim))
        fwarp = (1.0 + rng.random(n_channels), 2 * np.pi * rng.random(n_channels))
        swarp = (1.0 + rng.random(speech_dim), 2 * np.pi * rng.random(speech_dim))

    def response(v, gain, size, pair):
        """Per-dimension feature response to the driver, before noise."""
        if pair is None:
            base = np.full(size, v)
        else:
            base = np.sin(np.pi * warp * pair[0] * v + pair[1])
        return gain * base

    has_speech = np.zeros(n, dtype=bool)
    n_speech = int(round(speech_fraction * n))
    if n_speech:
        has_speech[rng.choice(n, size=n_speech, replace=False)] = True

    records = []
    for i in range(n):
        u, v = latents[i], drivers[i]
        if gains is None and fwarp is None:
            frames = frame_map[:, None] * v + noise * rng.standard_normal((n_channels, n_frames))
            gfeat = global_map * v + noise * rng.standard_normal(global_dim)
            vg = v
        else:
            g = 1.0 if gains is None else gains[i]
            vg = v * g
            frames = (frame_map * response(v, g, n_channels, fwarp))[:, None] \
                + noise * rng.standard_normal((n_channels, n_frames))
            sig = global_map * response(v, g, global_dim, gwarp)
            if n_ctx:
                # gain report: the per-record gain rescaled to [-1, 1]
                sig[-n_ctx:] = global_map[-n_ctx:] * (2.0 * (1.0 - g) / modulation - 1.0)
            gfeat = sig + noise * rng.standard_normal(global_dim)
        speech = meta = None
        if has_speech[i]:
            if gains is None and swarp is None:
                speech = speech_map * v + noise * rng.standard_normal(speech_dim)
            else:
                g = 1.0 if gains is None else gains[i]
                speech = speech_map * response(v, g, speech_dim, swarp) \
                    + noise * rng.standard_normal(speech_dim)
            # Length, four rate fields in [0,1] centered on the driver, two stds.
            raw = 0.5 + 0.5 * vg + 0.1 * noise * rng.standard_normal(4)
            meta = np.concatenate((
                [abs(10.0 + 5.0 * vg + noise * rng.standard_normal())],
                np.clip(raw, 0.0, 1.0),
                np.abs(0.5 + 0.1 * noise * rng.standard_normal(2)),
            ))
        records.append(SampleRecord(
            id=f"synth-{seed}-{i:06d}",
            frames=FrameSequence(frames),
            global_feature=gfeat,
            label=int(labels[i]),
            speech_embedding=speech,
            audio_meta=meta,
            latent=float(u),
        ))
    if label_flip > 0:
        # Flip draws come last, so a corrupted dataset differs from its
        # clean twin at the same seed only in the reported labels.
        flip = rng.random(n) < label_flip
        step = np.where(rng.random(n) < 0.5, -1, 1)
        flipped = np.clip(labels + np.where(flip, step, 0), 0, N_CLASSES - 1)
        for rec, fl in zip(records, flipped):
            rec.label = int(fl)
    return Dataset(records, split=split, n_channels=n_channels, global_dim=global_dim)


def latent_band(u) -> np.ndarray:
    """Class band of a latent scalar: the label synth_dataset assigns."""
    return np.clip(np.digitize(u, LATENT_EDGES[1:-1]), 0, N_CLASSES - 1)


# ---------------------------------------------------------------------------
# Samplers and splits
# ---------------------------------------------------------------------------

def class_balanced_sampler(labels: Sequence[int], batch_size: int,
                           seed: Optional[int] = None,
                           rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Yield index batches drawn class-first: uniform class, then uniform index.

    Every draw is with replacement, so each class contributes 1/4 of the
    indices in expectation regardless of the class frequencies in ``labels``.
    The stream is infinite; consume as many batches as needed.
    """
    labels = np.asarray(labels, dtype=np.int64)
    by_class = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
    for c, idx in enumerate(by_class):
        if idx.size == 0:
            raise ValueError("cannot balance absent class")
    if rng is None:
        rng = np.random.default_rng(seed)
    while True:
        classes = rng.integers(0, N_CLASSES, size=batch_size)
        batch = np.array([by_class[c][rng.integers(0, by_class[c].size)] for c in classes],
                         dtype=np.int64)
        yield batch


def sequential_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of shuffled indices, cut into batches (last may be short)."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def split_dataset(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split; per-class counts follow the fractions."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three numbers summing to 1")
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    parts: list[list[int]] = [[], [], []]
    for c in range(N_CLASSES):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_c = idx.size
        n_train = int(round(fractions[0] * n_c))
        n_val = int(round(fractions[1] * n_c))
        n_train = min(n_train, n_c)
        n_val = min(n_val, n_c - n_train)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    out = []
    for part, tag in zip(parts, ("train", "val", "test")):
        part = sorted(part)
        out.append(Dataset([dataset.records[i] for i in part], split=tag,
                           n_channels=dataset.n_channels, global_dim=dataset.global_dim))
    return tuple(out)
