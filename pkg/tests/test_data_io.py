import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voicequery.data_io import (
    DatasetManifest,
    MalformedWavError,
    MissingTensorError,
    ShapeMismatchError,
    UnsupportedBitDepthError,
    UnsupportedChannelsError,
    UnsupportedFormatError,
    UnsupportedRateError,
    VersionMismatchError,
    Waveform,
    WeightContainer,
    load_wav,
    load_weights,
    parse_manifest,
    read_manifest,
    save_wav,
    save_weights,
    split_dataset,
)
from voicequery.model import Hyperparams, init_weights


def wav_bytes(samples, rate=16000, bits=16, channels=1, fmt=1, extra_chunk=False):
    """RIFF layout built field by field, independent of the library writer."""
    data = struct.pack(f"<{len(samples)}h", *samples) if bits == 16 else bytes(len(samples) * bits // 8)
    block = channels * bits // 8
    fmt_chunk = b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, rate, rate * block, block, bits)
    chunks = fmt_chunk
    if extra_chunk:
        chunks += b"LIST" + struct.pack("<I", 3) + b"abc\x00"  # odd size, padded
    chunks += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def test_silence_loads_as_zeros():
    w = load_wav(wav_bytes([0] * 16000))
    assert len(w) == 16000
    assert not w.samples.any()


def test_golden_samples():
    w = load_wav(wav_bytes([0, 1000, -1000, 32767]))
    assert w.samples.tolist() == [0, 1000, -1000, 32767]
    assert w.sample_rate == 16000


def test_skips_unknown_chunks():
    assert load_wav(wav_bytes([5, -5], extra_chunk=True)).samples.tolist() == [5, -5]


@pytest.mark.parametrize(
    "kwargs, err",
    [
        ({"rate": 44100}, UnsupportedRateError),
        ({"bits": 8}, UnsupportedBitDepthError),
        ({"bits": 24}, UnsupportedBitDepthError),
        ({"channels": 2}, UnsupportedChannelsError),
        ({"fmt": 3}, UnsupportedFormatError),
    ],
)
def test_rejects_unsupported(kwargs, err):
    with pytest.raises(err):
        load_wav(wav_bytes([0] * 8, **kwargs))


@pytest.mark.parametrize("data", [b"", b"RIFX" + bytes(40), b"RIFF\x00\x00\x00\x00WAVE", wav_bytes([1])[:20]])
def test_rejects_malformed(data):
    with pytest.raises(MalformedWavError):
        load_wav(data)


@given(arrays(np.int16, st.integers(1, 2000)))
@settings(max_examples=50)
def test_wav_round_trip(samples):
    back = load_wav(save_wav(Waveform(samples)))
    np.testing.assert_array_equal(back.samples, samples)


def test_writer_matches_hand_layout():
    samples = [0, 1000, -1000, 32767]
    assert save_wav(Waveform(np.array(samples, dtype=np.int16))) == wav_bytes(samples)


def test_unit_scaling():
    w = Waveform(np.array([-32768, 0, 16384], dtype=np.int16))
    np.testing.assert_array_equal(w.unit(), [-1.0, 0.0, 0.5])


# ---------------------------------------------------------------------------
# manifests and splits


def manifest_of(counts):
    records = [(f"c{label}/{i}.wav", label) for label, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(records, n_queries=len(counts) - 1)


def test_split_1500_examples():
    tr, va, te = split_dataset(manifest_of([1500]))
    assert (len(tr), len(va), len(te)) == (1200, 150, 150)


def test_split_ten_examples():
    tr, va, te = split_dataset(manifest_of([10]))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_is_stratified_and_ordered():
    tr, va, te = split_dataset(manifest_of([20, 20]))
    for part, lo, hi in ((tr, 0, 16), (va, 16, 18), (te, 18, 20)):
        for label in (0, 1):
            assert [p for p, l in part.records if l == label] == [f"c{label}/{i}.wav" for i in range(lo, hi)]


def test_split_interleaved_manifest_keeps_per_class_order():
    records = [(f"{i}", i % 2) for i in range(40)]
    tr, va, te = split_dataset(DatasetManifest(records, 1))
    assert [p for p, l in va.records if l == 0] == ["32", "34"]
    assert [p for p, l in te.records if l == 1] == ["37", "39"]


def test_split_rejects_tiny_class():
    with pytest.raises(ValueError, match="class 1"):
        split_dataset(manifest_of([20, 9]))


@given(st.lists(st.integers(10, 60), min_size=1, max_size=5))
def test_split_is_partition(counts):
    m = manifest_of(counts)
    tr, va, te = split_dataset(m)
    parts = [set(p.records) for p in (tr, va, te)]
    assert parts[0] | parts[1] | parts[2] == set(m.records)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    for label, n in enumerate(counts):
        n_tr = sum(1 for _, l in tr.records if l == label)
        n_va = sum(1 for _, l in va.records if l == label)
        assert abs(n_tr - 0.8 * n) < 1 and abs(n_va - 0.1 * n) < 1


def test_manifest_text_round_trip(tmp_path):
    m = manifest_of([3, 2])
    path = tmp_path / "m.tsv"
    path.write_text(m.dumps())
    back = read_manifest(path)
    assert back.records == m.records and back.n_queries == 1
    assert back.resolve("a.wav") == tmp_path / "a.wav"


def test_manifest_rejects_bad_lines():
    with pytest.raises(ValueError, match="line 2"):
        parse_manifest("a.wav\t0\nno-label-here\n")
    with pytest.raises(ValueError):
        DatasetManifest([("a", 5)], n_queries=2)


# ---------------------------------------------------------------------------
# weight container


@pytest.mark.parametrize("variant", ["crnn-m", "crnn", "rnn-m"])
def test_weights_round_trip(variant):
    hp = Hyperparams(c=4, k=6, d=3, r_hidden=5, n_classes=4, variant=variant)
    wc = WeightContainer(hp, init_weights(hp, np.random.default_rng(0)))
    blob = save_weights(wc)
    back = load_weights(blob)
    assert back == wc
    assert save_weights(back) == blob
    for name, arr in wc.tensors.items():
        assert back.tensors[name].tobytes() == arr.tobytes()


def test_weights_special_values_bit_exact():
    hp = Hyperparams(c=2, k=2, d=2, r_hidden=2, n_classes=2)
    w = init_weights(hp, np.random.default_rng(0))
    w["dnn_b2"] = np.array([-0.0, np.float32(1e-45)], dtype=np.float32)
    back = load_weights(save_weights(WeightContainer(hp, w)))
    assert back.tensors["dnn_b2"].tobytes() == w["dnn_b2"].tobytes()


def test_truncated_container_is_missing_tensor():
    hp = Hyperparams(c=4, k=6, d=3, r_hidden=5, n_classes=4)
    blob = save_weights(WeightContainer(hp, init_weights(hp, np.random.default_rng(0))))
    for cut in (len(blob) - 1, len(blob) // 2, 40):
        with pytest.raises(MissingTensorError):
            load_weights(blob[:cut])


def test_shape_mismatch():
    hp = Hyperparams(c=4, k=6, d=3, r_hidden=5, n_classes=4)
    w = init_weights(hp, np.random.default_rng(0))
    w["gru_uz"] = np.zeros((6, 7), dtype=np.float32)
    with pytest.raises(ShapeMismatchError):
        save_weights(WeightContainer(hp, w))


def test_version_mismatch():
    hp = Hyperparams(c=4, k=6, d=3, r_hidden=5, n_classes=4)
    blob = bytearray(save_weights(WeightContainer(hp, init_weights(hp, np.random.default_rng(0)))))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        load_weights(bytes(blob))
