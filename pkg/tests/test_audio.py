import struct

import numpy as np
import pytest

from wavecnn.audio import (
    CLIP_SAMPLES,
    DatasetIndex,
    MalformedWavError,
    TruncatedWavError,
    UnsupportedWavError,
    decode_wav,
    fix_length,
    make_batches,
    preprocess,
    resample_sinc,
    split_entries,
    standardize,
    to_mono_8k,
)
from wavecnn.tensor import RandomSource


def wav_bytes(samples, rate, bits=16, audio_format=1):
    """Assemble a RIFF/WAVE blob; samples is [frames, channels] in [-1,1]."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < samples.shape[1]:
        samples = samples.T
    frames, channels = samples.shape
    if audio_format == 3:
        raw = samples.astype("<f4").tobytes()
    elif bits == 16:
        raw = np.clip(np.rint(samples * 32768), -32768, 32767).astype("<i2").tobytes()
    elif bits == 8:
        raw = (np.clip(np.rint(samples * 128), -128, 127) + 128).astype(np.uint8).tobytes()
    elif bits == 24:
        vals = np.clip(np.rint(samples * 8388608), -8388608, 8388607).astype(np.int32)
        b = np.empty((vals.size, 3), dtype=np.uint8)
        flat = vals.ravel()
        b[:, 0] = flat & 0xFF
        b[:, 1] = (flat >> 8) & 0xFF
        b[:, 2] = (flat >> 16) & 0xFF
        raw = b.tobytes()
    else:
        raise ValueError(bits)
    if audio_format == 3:
        bits = 32
    block = channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(raw), b"WAVE",
        b"fmt ", 16, audio_format, channels, rate, rate * block, block, bits,
        b"data", len(raw),
    )
    return header + raw


class TestDecodeWav:
    def test_16bit_positive_full_scale(self):
        data = wav_bytes(np.array([32767 / 32768.0]), 8000)
        samples, rate, ch = decode_wav(data)
        assert rate == 8000 and ch == 1
        assert abs(samples[0, 0] - 32767 / 32768) < 1e-12

    def test_16bit_negative_full_scale(self):
        raw = struct.pack("<h", -32768)
        data = wav_bytes(np.zeros(1), 8000)[: -2] + raw
        samples, _, _ = decode_wav(data)
        assert samples[0, 0] == -1.0

    def test_stereo_header_arithmetic(self):
        """1 second of 44100 Hz stereo: 44100 frames x 2 channels."""
        rng = np.random.default_rng(0)
        data = wav_bytes(rng.uniform(-0.5, 0.5, (44100, 2)), 44100)
        samples, rate, ch = decode_wav(data)
        assert samples.shape == (44100, 2) and rate == 44100 and ch == 2

    def test_8bit_unsigned_recentered(self):
        data = wav_bytes(np.array([0.0, 0.5]), 8000, bits=8)
        samples, _, _ = decode_wav(data)
        np.testing.assert_allclose(samples.ravel(), [0.0, 0.5], atol=1 / 128)

    def test_24bit_roundtrip(self):
        vals = np.array([0.25, -0.75, 0.5])
        samples, _, _ = decode_wav(wav_bytes(vals, 16000, bits=24))
        np.testing.assert_allclose(samples.ravel(), vals, atol=1e-6)

    def test_float32_passthrough(self):
        vals = np.array([0.1, -0.9, 1.5])  # float WAV is not rescaled
        samples, _, _ = decode_wav(wav_bytes(vals, 8000, audio_format=3))
        np.testing.assert_allclose(samples.ravel(), vals, rtol=1e-6)

    def test_skips_unknown_chunks(self):
        good = wav_bytes(np.array([0.5]), 8000)
        extra = b"LIST" + struct.pack("<I", 4) + b"INFO"
        patched = good[:12] + extra + good[12:]
        patched = patched[:4] + struct.pack("<I", len(patched) - 8) + patched[8:]
        samples, _, _ = decode_wav(patched)
        assert abs(samples[0, 0] - 0.5) < 1e-3

    def test_malformed_riff_names_offset(self):
        with pytest.raises(MalformedWavError, match="offset 0"):
            decode_wav(b"JUNK" + b"\x00" * 40)

    def test_malformed_wave_tag(self):
        blob = bytearray(wav_bytes(np.zeros(4), 8000))
        blob[8:12] = b"AVI "
        with pytest.raises(MalformedWavError, match="offset 8"):
            decode_wav(bytes(blob))

    def test_unsupported_codec_named(self):
        blob = bytearray(wav_bytes(np.zeros(4), 8000))
        blob[20:22] = struct.pack("<H", 7)  # mu-law
        with pytest.raises(UnsupportedWavError, match="format 7"):
            decode_wav(bytes(blob))

    def test_truncated_data_chunk(self):
        blob = wav_bytes(np.zeros(100), 8000)
        with pytest.raises(TruncatedWavError, match="declares"):
            decode_wav(blob[:-50])

    def test_missing_chunks(self):
        with pytest.raises(TruncatedWavError):
            decode_wav(b"RIFF")
        with pytest.raises(MalformedWavError, match="no fmt"):
            decode_wav(b"RIFF\x04\x00\x00\x00WAVE")


class TestResampler:
    def test_already_8k_is_identity(self):
        x = np.random.default_rng(1).standard_normal(8000)
        y = to_mono_8k(x, 8000)
        np.testing.assert_array_equal(x, y)

    def test_duration_arithmetic(self):
        assert len(resample_sinc(np.zeros(176400), 44100, 8000)) == 32000
        assert len(resample_sinc(np.zeros(44100), 44100, 8000)) == 8000
        assert abs(len(resample_sinc(np.zeros(22050), 22050, 8000)) - 8000) <= 1

    def test_upsampling_refused(self):
        with pytest.raises(ValueError, match="upsample"):
            to_mono_8k(np.zeros(100), 4000)

    def test_channels_averaged(self):
        left = np.full(8000, 0.5)
        right = np.full(8000, -0.1)
        mono = to_mono_8k(np.stack([left, right], axis=1), 8000)
        np.testing.assert_allclose(mono, 0.2, atol=1e-12)

    def test_pure_tone_matches_analytic_reference(self):
        """1 kHz at 44100 Hz correlates > 0.999 with an analytic 1 kHz
        sine generated directly at 8 kHz."""
        src = 44100
        t = np.arange(src * 2) / src
        y = resample_sinc(np.sin(2 * np.pi * 1000 * t), src, 8000)
        ref = np.sin(2 * np.pi * 1000 * np.arange(len(y)) / 8000)
        mid = slice(len(y) // 4, 3 * len(y) // 4)
        corr = np.corrcoef(y[mid], ref[mid])[0, 1]
        assert corr > 0.999

    @staticmethod
    def tone_amplitude(freq, src=44100):
        t = np.arange(src) / src
        y = resample_sinc(np.sin(2 * np.pi * freq * t), src, 8000)
        mid = y[len(y) // 4 : 3 * len(y) // 4]
        return float(np.sqrt(2.0) * np.sqrt(np.mean(mid**2)))

    def test_passband_39khz(self):
        assert self.tone_amplitude(3900) >= 0.9

    def test_stopband_5khz(self):
        assert self.tone_amplitude(5000) <= 0.05

    def test_resample_determinism(self):
        x = np.random.default_rng(2).standard_normal(22050)
        np.testing.assert_array_equal(
            resample_sinc(x, 22050, 8000), resample_sinc(x, 22050, 8000)
        )


class TestStandardize:
    def test_constant_clip_maps_to_zeros(self):
        np.testing.assert_array_equal(standardize(np.full(100, 3.3)), 0.0)

    def test_two_point_case(self):
        np.testing.assert_allclose(standardize(np.array([0.0, 2.0])), [-1.0, 1.0])

    def test_random_clip_tolerances(self):
        x = np.random.default_rng(3).uniform(-0.3, 0.8, 20000)
        y = standardize(x)
        assert abs(y.mean()) < 1e-5
        assert abs(y.var() - 1.0) < 1e-4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            standardize(np.array([]))


class TestFixLength:
    def test_exact_length_unchanged(self):
        x = np.arange(CLIP_SAMPLES, dtype=np.float64)
        np.testing.assert_array_equal(fix_length(x), x)

    def test_short_zero_padded_at_end(self):
        y = fix_length(np.ones(8000))
        assert y.shape == (CLIP_SAMPLES,)
        assert y[:8000].all() and not y[8000:].any()

    def test_long_truncated_to_head(self):
        x = np.arange(40000, dtype=np.float64)
        np.testing.assert_array_equal(fix_length(x), x[:32000])


class TestPipeline:
    def test_preprocess_is_bit_reproducible(self):
        rng = np.random.default_rng(4)
        blob = wav_bytes(rng.uniform(-0.8, 0.8, (22050, 2)), 22050)
        a, b = preprocess(blob), preprocess(blob)
        assert a.dtype == np.float32 and a.shape == (CLIP_SAMPLES,)
        np.testing.assert_array_equal(a, b)

    def test_preprocessed_clip_is_standardized(self):
        rng = np.random.default_rng(5)
        blob = wav_bytes(rng.uniform(-0.8, 0.8, 44100), 44100)
        clip = preprocess(blob)
        live = clip[:8000]  # 1 s of signal, rest is pad
        assert abs(np.float64(live).mean()) < 1e-2


def write_corpus(root, n_files=12, rate=16000, seconds=0.25, folds=(1, 10)):
    """Small on-disk WAV corpus in fold<N>/ layout plus its metadata CSV."""
    rng = np.random.default_rng(17)
    rows = ["slice_file_name,fs_id,start,end,salience,fold,classID,class"]
    n = int(rate * seconds)
    for i in range(n_files):
        fold = folds[i % len(folds)]
        label = i % 2
        name = f"clip{i:03d}.wav"
        d = root / f"fold{fold}"
        d.mkdir(exist_ok=True, parents=True)
        if label == 0:
            t = np.arange(n) / rate
            wave = 0.7 * np.sin(2 * np.pi * rng.uniform(200, 1800) * t)
        else:
            wave = rng.uniform(-0.7, 0.7, n)
        (d / name).write_bytes(wav_bytes(wave, rate))
        cls = "sine" if label == 0 else "noise"
        rows.append(f"{name},0,0.0,{seconds},1,{fold},{label},{cls}")
    meta = root / "meta.csv"
    meta.write_text("\n".join(rows) + "\n")
    return meta


class TestDatasetIndex:
    def test_metadata_csv_with_extra_columns(self, tmp_path):
        meta = write_corpus(tmp_path)
        index = DatasetIndex.from_metadata_csv(meta, tmp_path)
        assert len(index.entries) == 12
        assert index.class_names == ["sine", "noise"]
        assert index.entries[0].duration == pytest.approx(0.25)

    def test_missing_required_column(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("file,fold\nx.wav,1\n")
        with pytest.raises(ValueError, match="missing columns"):
            DatasetIndex.from_metadata_csv(bad, tmp_path)

    def test_split_disjoint_and_exhaustive(self, tmp_path):
        """Synthetic 100-row metadata: fold-10 split leaves no overlap and
        no orphan."""
        rows = ["slice_file_name,fold,classID"]
        rng = np.random.default_rng(6)
        for i in range(100):
            rows.append(f"c{i:03d}.wav,{rng.integers(1, 11)},{rng.integers(0, 10)}")
        meta = tmp_path / "meta.csv"
        meta.write_text("\n".join(rows) + "\n")
        index = DatasetIndex.from_metadata_csv(meta, tmp_path)
        train, test = split_entries(index.entries, test_fold=10)
        train_ids = {e.clip_id for e in train}
        test_ids = {e.clip_id for e in test}
        assert not (train_ids & test_ids)
        assert len(train_ids | test_ids) == 100
        assert all(e.fold == 10 for e in test)
        assert all(e.fold != 10 for e in train)

    def test_load_and_batch_invariants(self, tmp_path):
        meta = write_corpus(tmp_path)
        index = DatasetIndex.from_metadata_csv(meta, tmp_path)
        clip = index.load(index.entries[0])
        assert clip.shape == (CLIP_SAMPLES,) and clip.dtype == np.float32
        for batch in make_batches(index, index.entries, 4, RandomSource(1)):
            assert batch.x.shape[1:] == (CLIP_SAMPLES, 1)

    def test_cache_blob_roundtrip(self, tmp_path):
        meta = write_corpus(tmp_path)
        cache = tmp_path / "cache"
        a = DatasetIndex.from_metadata_csv(meta, tmp_path, cache_dir=cache)
        first = a.load(a.entries[0]).copy()
        blobs = list(cache.glob("*.f32"))
        assert blobs, "cache should hold preprocessed blobs"
        b = DatasetIndex.from_metadata_csv(meta, tmp_path, cache_dir=cache)
        np.testing.assert_array_equal(b.load(b.entries[0]), first)

    def test_flat_layout_fallback(self, tmp_path):
        rng = np.random.default_rng(7)
        (tmp_path / "solo.wav").write_bytes(wav_bytes(rng.uniform(-0.5, 0.5, 4000), 8000))
        meta = tmp_path / "meta.csv"
        meta.write_text("slice_file_name,fold,classID\nsolo.wav,3,1\n")
        index = DatasetIndex.from_metadata_csv(meta, tmp_path)
        assert index.load(index.entries[0]).shape == (CLIP_SAMPLES,)
