"""Audio and dataset ingestion plus the binary weight container."""

from __future__ import annotations

import io
import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Hyperparams, weight_shapes

SAMPLE_RATE = 16000
FULL_SCALE = 32768.0


class WavError(ValueError):
    """Base class for rejected WAV input."""


class MalformedWavError(WavError):
    pass


class UnsupportedRateError(WavError):
    pass


class UnsupportedBitDepthError(WavError):
    pass


class UnsupportedChannelsError(WavError):
    pass


class UnsupportedFormatError(WavError):
    """Non-PCM encodings (float, mu-law, ...)."""


class WeightFormatError(ValueError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class MissingTensorError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


@dataclass
class Waveform:
    """Mono 16 kHz audio.

    ``samples`` holds either int16 PCM values or unit-scaled floats;
    :meth:`unit` always gives floats in [-1, 1].
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedRateError(f"sample rate {self.sample_rate} != {SAMPLE_RATE}")
        if self.samples.ndim != 1:
            raise UnsupportedChannelsError("waveform must be mono (1-D samples)")
        if len(self.samples) == 0:
            raise ValueError("waveform is empty")

    def __len__(self):
        return len(self.samples)

    def unit(self) -> np.ndarray:
        if np.issubdtype(self.samples.dtype, np.integer):
            return self.samples.astype(np.float64) / FULL_SCALE
        return self.samples.astype(np.float64, copy=False)

    def pcm16(self) -> np.ndarray:
        if self.samples.dtype == np.int16:
            return self.samples
        x = np.round(self.unit() * FULL_SCALE)
        return np.clip(x, -32768, 32767).astype(np.int16)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(data: bytes) -> Waveform:
    """Parse a RIFF/WAVE byte string holding 16 kHz, 16-bit, mono PCM."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE container")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedWavError(f"chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise MalformedWavError("missing fmt chunk")
    if payload is None:
        raise MalformedWavError("missing data chunk")

    audio_format, channels, rate, _, _, bits = fmt
    # 0xFFFE is WAVE_FORMAT_EXTENSIBLE; accept it when the rest matches.
    if audio_format not in (1, 0xFFFE):
        raise UnsupportedFormatError(f"audio format {audio_format} is not PCM")
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"sample rate {rate} Hz; only {SAMPLE_RATE} Hz is supported")
    if bits != 16:
        raise UnsupportedBitDepthError(f"{bits}-bit samples; only 16-bit is supported")
    if channels != 1:
        raise UnsupportedChannelsError(f"{channels} channels; only mono is supported")
    if len(payload) % 2:
        payload = payload[:-1]
    samples = np.frombuffer(payload, dtype="<i2").astype(np.int16)
    if samples.size == 0:
        raise MalformedWavError("data chunk holds no samples")
    return Waveform(samples)


def save_wav(w: Waveform) -> bytes:
    pcm = w.pcm16().astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, SAMPLE_RATE, SAMPLE_RATE * 2, 2, 16,
        b"data", len(pcm),
    )
    return header + pcm


def read_wav(path) -> Waveform:
    return load_wav(Path(path).read_bytes())


def write_wav(path, w: Waveform) -> None:
    Path(path).write_bytes(save_wav(w))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list[tuple[str, int]]
    n_queries: int
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        for path, label in self.records:
            if not 0 <= label <= self.n_queries:
                raise ValueError(f"label {label} for {path!r} outside [0, {self.n_queries}]")

    def __len__(self):
        return len(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self) -> list[tuple[Waveform, int]]:
        return [(read_wav(self.resolve(p)), label) for p, label in self.records]

    def dumps(self) -> str:
        return "".join(f"{p}\t{label}\n" for p, label in self.records)


def parse_manifest(text: str, n_queries: int | None = None, root=None) -> DatasetManifest:
    """Parse ``path<TAB>label`` lines.

    When ``n_queries`` is omitted the largest label is taken as "unknown".
    """
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            path, label = line.rsplit("\t", 1)
            records.append((path, int(label)))
        except ValueError:
            raise ValueError(f"manifest line {lineno}: expected 'path<TAB>label', got {line!r}") from None
    if n_queries is None:
        n_queries = max((label for _, label in records), default=0)
    return DatasetManifest(records, n_queries, Path(root) if root is not None else None)


def read_manifest(path, n_queries: int | None = None) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(), n_queries, root=path.parent)


def split_counts(n: int) -> tuple[int, int, int]:
    if n < 10:
        raise ValueError(f"class with {n} examples cannot form train/validation/test splits (need >= 10)")
    train = (8 * n) // 10
    val = n // 10
    return train, val, n - train - val


def split_indices(labels) -> tuple[list[int], list[int], list[int]]:
    """Per class, in input order: first 80% train, next 10% validation, rest test."""
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, label in enumerate(labels):
        by_class[label].append(i)
    dest = [0] * len(labels)
    for label, idx in by_class.items():
        try:
            n_train, n_val, _ = split_counts(len(idx))
        except ValueError as e:
            raise ValueError(f"class {label}: {e}") from None
        for j, i in enumerate(idx):
            dest[i] = 0 if j < n_train else 1 if j < n_train + n_val else 2
    parts = ([], [], [])
    for i, d in enumerate(dest):
        parts[d].append(i)
    return parts


def split_dataset(manifest: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    parts = split_indices([label for _, label in manifest.records])
    return tuple(
        DatasetManifest([manifest.records[i] for i in p], manifest.n_queries, manifest.root) for p in parts
    )


# ---------------------------------------------------------------------------
# Weight container
#
# layout (little-endian):
#   magic "VQRW" | u32 version | u32 len | hyperparams JSON
#   u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u32 dims...
#   payloads, float32 row-major, in directory order
# ---------------------------------------------------------------------------

MAGIC = b"VQRW"
FORMAT_VERSION = 1


@dataclass
class WeightContainer:
    hyperparams: Hyperparams
    tensors: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, WeightContainer):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.hyperparams == other.hyperparams
            and self.tensors.keys() == other.tensors.keys()
            and all(
                self.tensors[k].shape == other.tensors[k].shape
                and self.tensors[k].astype("<f4").tobytes() == other.tensors[k].astype("<f4").tobytes()
                for k in self.tensors
            )
        )

    def validate(self) -> None:
        expected = weight_shapes(self.hyperparams)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise MissingTensorError(f"missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeMismatchError(
                    f"tensor {name!r} has shape {tuple(self.tensors[name].shape)}, expected {shape}"
                )
        extra = self.tensors.keys() - expected.keys()
        if extra:
            raise WeightFormatError(f"unexpected tensors for variant {self.hyperparams.variant}: {sorted(extra)}")


def save_weights(wc: WeightContainer) -> bytes:
    wc.validate()
    out = io.BytesIO()
    hp_json = json.dumps(wc.hyperparams.to_dict(), sort_keys=True).encode()
    out.write(MAGIC + struct.pack("<II", wc.format_version, len(hp_json)) + hp_json)
    names = list(weight_shapes(wc.hyperparams))
    out.write(struct.pack("<I", len(names)))
    for name in names:
        shape = wc.tensors[name].shape
        enc = name.encode()
        out.write(struct.pack(f"<H{len(enc)}sB{len(shape)}I", len(enc), enc, len(shape), *shape))
    for name in names:
        out.write(np.ascontiguousarray(wc.tensors[name], dtype="<f4").tobytes())
    return out.getvalue()


def load_weights(data: bytes) -> WeightContainer:
    if data[:4] != MAGIC:
        raise WeightFormatError("bad magic; not a weight container")
    try:
        version, hp_len = struct.unpack_from("<II", data, 4)
    except struct.error:
        raise MissingTensorError("container truncated inside header") from None
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, reader supports {FORMAT_VERSION}")
    pos = 12
    if pos + hp_len > len(data):
        raise MissingTensorError("container truncated inside header")
    try:
        hp = Hyperparams(**json.loads(data[pos: pos + hp_len]))
    except (ValueError, TypeError) as e:
        raise WeightFormatError(f"unreadable hyperparameters: {e}") from None
    pos += hp_len

    directory = []
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2: pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            directory.append((name, tuple(shape)))
    except struct.error:
        raise MissingTensorError("container truncated inside tensor directory") from None

    tensors = {}
    for name, shape in directory:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            break
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    wc = WeightContainer(hp, tensors, version)
    wc.validate()
    return wc


def write_weights(path, wc: WeightContainer) -> None:
    Path(path).write_bytes(save_weights(wc))


def read_weights(path) -> WeightContainer:
    return load_weights(Path(path).read_bytes())
