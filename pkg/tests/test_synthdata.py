import dataclasses
import hashlib
import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avfg.fileformat import (
    BadMagicError,
    ChecksumError,
    FormatError,
    TruncatedError,
    VersionError,
    decode_clip,
    encode_clip,
)
from avfg.synthdata import (
    FAKE,
    REAL,
    ClipPair,
    CorpusSpec,
    SeededCorpus,
    SplitStyle,
    build_corpus,
    correlation,
    frame_envelope,
    generate_fake,
    generate_real,
    generate_split,
    load_manifest,
    load_split,
    patch_series,
    read_clip,
    write_clip,
)

SMALL = dict(n_train=10, n_test=4, n_shift=4)


def _pearson(a, b):
    # independent route through numpy's correlation matrix
    return float(np.corrcoef(a, b)[0, 1])


def _patch_corr(clip, meta, spec):
    env = frame_envelope(clip.audio, spec.frames)
    return _pearson(patch_series(clip.visual, *meta["patch"], spec.patch), env)


@pytest.fixture(scope="module")
def clip_sample():
    spec = CorpusSpec()
    reals = [generate_real(spec, np.random.default_rng([1, i])) for i in range(100)]
    fakes = [generate_fake(spec, np.random.default_rng([2, i])) for i in range(100)]
    return spec, reals, fakes


class TestGeneration:
    def test_reals_pass_correlation_check(self, clip_sample):
        spec, reals, _ = clip_sample
        corrs = [_patch_corr(c, m, spec) for c, m in reals]
        assert min(corrs) >= 0.9

    def test_fakes_weakly_correlated_on_average(self, clip_sample):
        spec, _, fakes = clip_sample
        corrs = [_patch_corr(c, m, spec) for c, m in fakes]
        assert np.mean(corrs) <= 0.3
        assert max(corrs) <= 0.5

    def test_independent_fakes_near_zero(self, clip_sample):
        spec, _, fakes = clip_sample
        corrs = np.array([_patch_corr(c, m, spec) for c, m in fakes])
        # standard error of a mean of 100 correlations between 8-point series is about 0.04
        assert abs(corrs.mean()) < 0.15

    def test_clip_invariants(self, clip_sample):
        _, reals, fakes = clip_sample
        for clip, _ in reals + fakes:
            clip.validate()
            assert clip.audio.shape == (4096, 1) and clip.visual.shape == (8, 1, 32, 32)
            assert clip.audio.dtype == np.float32 and clip.visual.dtype == np.float32
        assert {c.label for c, _ in reals} == {REAL} and {c.label for c, _ in fakes} == {FAKE}
        assert {c.provenance for c, _ in fakes} == {"generated_fake"}

    def test_noiseless_patch_equals_envelope(self):
        spec = CorpusSpec(noise=0.0, distractors=0)
        clip, meta = generate_real(spec, np.random.default_rng(0))
        series = patch_series(clip.visual, *meta["patch"], spec.patch)
        env = frame_envelope(clip.audio, spec.frames)
        np.testing.assert_allclose(series, env, rtol=0, atol=1e-6)  # float32 storage
        r, c = meta["patch"]
        block = clip.visual[:, :, r : r + spec.patch, c : c + spec.patch]
        assert np.all(block == block[:, :, :1, :1])

    def test_shifted_fakes_are_rolled_envelopes(self):
        spec = CorpusSpec(noise=0.0, distractors=0, shift_style=SplitStyle(anchor=(12, 12), fake_style="shift"))
        clip, meta = generate_fake(spec, np.random.default_rng(3), split="shift")
        series = patch_series(clip.visual, *meta["patch"], spec.patch)
        env = frame_envelope(clip.audio, spec.frames)
        shifts = [k for k in range(spec.frames) if np.allclose(np.roll(env, k), series, atol=1e-6)]
        assert shifts and all(2 <= k <= spec.frames - 2 for k in shifts)

    @pytest.mark.parametrize("seed", range(10))
    def test_local_fakes_break_one_run_of_frames(self, seed):
        style = SplitStyle(fake_style="local")
        spec = CorpusSpec(noise=0.0, distractors=0, shift_style=style)
        clip, meta = generate_fake(spec, np.random.default_rng(seed), split="shift")
        series = patch_series(clip.visual, *meta["patch"], spec.patch)
        env = frame_envelope(clip.audio, spec.frames)
        off = np.flatnonzero(~np.isclose(series, env, rtol=0, atol=1e-6))
        # a contiguous run of at most half the frames, at least one frame off
        assert 1 <= len(off) <= 4 and off[-1] - off[0] < 4
        assert _pearson(series, env) <= 0.8

    def test_different_seeds_differ(self):
        spec = CorpusSpec()
        a, _ = generate_real(spec, np.random.default_rng(1))
        b, _ = generate_real(spec, np.random.default_rng(2))
        assert a.audio.tobytes() != b.audio.tobytes() and a.visual.tobytes() != b.visual.tobytes()

    def test_same_seed_same_clip(self):
        spec = CorpusSpec()
        a, _ = generate_fake(spec, np.random.default_rng(9))
        b, _ = generate_fake(spec, np.random.default_rng(9))
        assert a.audio.tobytes() == b.audio.tobytes() and a.visual.tobytes() == b.visual.tobytes()

    def test_correlation_helper_matches_numpy(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.standard_normal(8), rng.standard_normal(8)
            assert correlation(a, b) == pytest.approx(_pearson(a, b), abs=1e-12)
        assert correlation(np.ones(4), np.arange(4.0)) == 0.0


class TestSpec:
    def test_patch_outside_frame(self):
        with pytest.raises(ValueError):
            CorpusSpec(train_style=SplitStyle(anchor=(28, 8)))

    def test_unbalanced_training_split(self):
        with pytest.raises(ValueError):
            CorpusSpec(n_train=11)

    def test_unknown_fake_style(self):
        with pytest.raises(ValueError):
            CorpusSpec(shift_style=SplitStyle(fake_style="mirror"))

    def test_too_many_distractors(self):
        with pytest.raises(ValueError):
            CorpusSpec(distractors=50)

    def test_dict_round_trip(self):
        spec = CorpusSpec(noise=0.03, seed=4)
        assert CorpusSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_distractor_slots_avoid_main_patch(self):
        spec = CorpusSpec()
        for style in (spec.train_style, spec.shift_style):
            r0, c0 = style.anchor
            lo_r, hi_r = r0 - style.jitter, r0 + style.jitter + spec.patch
            lo_c, hi_c = c0 - style.jitter, c0 + style.jitter + spec.patch
            for r, c in spec.distractor_slots(style):
                overlap_r = r < hi_r and r + spec.patch > lo_r
                overlap_c = c < hi_c and c + spec.patch > lo_c
                assert not (overlap_r and overlap_c)

    def test_distractors_painted_when_enabled(self):
        spec = CorpusSpec(noise=0.0, distractors=2)
        clip, meta = generate_real(spec, np.random.default_rng(5))
        assert len(meta["distractors"]) == 2
        env = frame_envelope(clip.audio, spec.frames)
        for r, c in meta["distractors"]:
            block = clip.visual[:, :, r : r + spec.patch, c : c + spec.patch]
            assert np.all(block == block[:, :, :1, :1])
            assert not np.allclose(patch_series(clip.visual, r, c, spec.patch), env, atol=1e-3)


class TestCorpus:
    def test_counts_and_balance(self, tmp_path):
        spec = CorpusSpec(n_train=200, n_test=60, n_shift=6)
        manifest = build_corpus(spec, tmp_path)
        by_split = {}
        for e in manifest["clips"]:
            by_split.setdefault(e["split"], []).append(e["label"])
        assert len(by_split["train"]) == 200 and sum(by_split["train"]) == 100
        assert len(by_split["test"]) == 60
        assert len(by_split["shift"]) == 6

    def test_same_seed_identical_files(self, tmp_path):
        spec = CorpusSpec(**SMALL, seed=3)
        m1 = build_corpus(spec, tmp_path / "a")
        m2 = build_corpus(spec, tmp_path / "b")
        assert m1 == m2
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
        for e in m1["clips"]:
            raw = (tmp_path / "b" / e["file"]).read_bytes()
            assert hashlib.sha256(raw).hexdigest() == e["sha256"]

    def test_other_seed_differs(self, tmp_path):
        m1 = build_corpus(CorpusSpec(**SMALL, seed=1), tmp_path / "a")
        m2 = build_corpus(CorpusSpec(**SMALL, seed=2), tmp_path / "b")
        assert [e["sha256"] for e in m1["clips"]] != [e["sha256"] for e in m2["clips"]]

    def test_shift_patch_location_always_differs(self, tmp_path):
        spec = CorpusSpec(n_train=40, n_test=4, n_shift=40)
        manifest = build_corpus(spec, tmp_path)
        train_locs = {tuple(e["patch"]) for e in manifest["clips"] if e["split"] == "train"}
        shift_locs = [tuple(e["patch"]) for e in manifest["clips"] if e["split"] == "shift"]
        assert all(loc not in train_locs for loc in shift_locs)
        assert all(loc != tuple(spec.train_style.anchor) for loc in shift_locs)

    def test_load_split_matches_generation(self, tmp_path):
        spec = CorpusSpec(**SMALL)
        build_corpus(spec, tmp_path)
        loaded = load_split(tmp_path, "test")
        fresh = [c for c, _ in generate_split(spec, "test")]
        assert [c.clip_id for c in loaded] == [c.clip_id for c in fresh]
        for a, b in zip(loaded, fresh):
            assert a.audio.tobytes() == b.audio.tobytes() and a.visual.tobytes() == b.visual.tobytes()

    def test_seeded_corpus_matches_files(self, tmp_path):
        spec = CorpusSpec(**SMALL)
        build_corpus(dataclasses.replace(spec, seed=5), tmp_path)
        mem = SeededCorpus(spec)(5)
        assert [c.visual.tobytes() for c in mem["shift"]] == [c.visual.tobytes() for c in load_split(tmp_path, "shift")]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path)

    def test_manifest_label_tampering_detected(self, tmp_path):
        build_corpus(CorpusSpec(**SMALL), tmp_path)
        path = tmp_path / "manifest.json"
        m = json.loads(path.read_text())
        m["clips"][0]["label"] = 1 - m["clips"][0]["label"]
        path.write_text(json.dumps(m))
        with pytest.raises(FormatError):
            load_split(tmp_path, m["clips"][0]["split"])


class TestClipFile:
    def _clip(self):
        rng = np.random.default_rng(0)
        return ClipPair(
            "x",
            rng.uniform(-1, 1, (64, 1)).astype(np.float32),
            rng.uniform(0, 1, (4, 1, 5, 5)).astype(np.float32),
            FAKE,
            "pseudo_fake",
        )

    def test_round_trip(self, tmp_path):
        clip = self._clip()
        write_clip(tmp_path / "x.avfg", clip)
        back = read_clip(tmp_path / "x.avfg")
        assert back.audio.tobytes() == clip.audio.tobytes() and back.visual.tobytes() == clip.visual.tobytes()
        assert (back.label, back.provenance, back.clip_id) == (FAKE, "pseudo_fake", "x")

    def test_header_layout(self):
        clip = self._clip()
        buf = encode_clip(clip.audio, clip.visual, 1, 2)
        assert buf[:4] == b"AVFG"
        assert struct.unpack("<HBB", buf[4:8]) == (1, 1, 2)
        assert struct.unpack("<I", buf[8:12]) == (2,)  # audio rank
        assert struct.unpack("<I", buf[-4:]) == (zlib.crc32(buf[8:-4]),)

    def _expect(self, buf, exc, code, tmp_path):
        path = tmp_path / "bad.avfg"
        path.write_bytes(buf)
        with pytest.raises(exc) as info:
            read_clip(path)
        assert info.value.code == code
        assert isinstance(info.value, FormatError)

    def test_corrupted_crc(self, tmp_path):
        buf = bytearray(encode_clip(*self._fields()))
        buf[-1] ^= 0xFF
        self._expect(bytes(buf), ChecksumError, 23, tmp_path)

    def test_flipped_payload_byte(self, tmp_path):
        buf = bytearray(encode_clip(*self._fields()))
        buf[40] ^= 0x01
        self._expect(bytes(buf), ChecksumError, 23, tmp_path)

    def test_empty_file(self, tmp_path):
        self._expect(b"", TruncatedError, 24, tmp_path)

    def test_cut_payload(self, tmp_path):
        buf = encode_clip(*self._fields())
        self._expect(buf[: len(buf) // 2], TruncatedError, 24, tmp_path)

    def test_bad_magic(self, tmp_path):
        buf = encode_clip(*self._fields())
        self._expect(b"RIFF" + buf[4:], BadMagicError, 21, tmp_path)

    def test_wrong_version(self, tmp_path):
        buf = encode_clip(*self._fields())
        self._expect(buf[:4] + struct.pack("<H", 9) + buf[6:], VersionError, 22, tmp_path)

    def test_bad_label_code(self, tmp_path):
        a, v, _, p = self._fields()
        self._expect(encode_clip(a, v, 7, p), FormatError, 20, tmp_path)

    def _fields(self):
        c = self._clip()
        return c.audio, c.visual, c.label, 2

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=120))
    def test_garbage_never_crashes(self, data):
        try:
            decode_clip(data)
        except FormatError:
            pass


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 20), st.just(1)), elements=st.floats(width=32, allow_nan=False)),
    arrays(np.float32, st.tuples(st.integers(1, 3), st.just(1), st.integers(1, 4), st.integers(1, 4)),
           elements=st.floats(width=32, allow_nan=False)),
)
def test_any_finite_float32_round_trips(audio, visual):
    a, v, label, prov = decode_clip(encode_clip(audio, visual, 0, 1))
    assert a.tobytes() == audio.tobytes() and v.tobytes() == visual.tobytes()
    assert (label, prov) == (0, 1)
