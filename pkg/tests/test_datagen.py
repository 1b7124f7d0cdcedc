import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssvaerr import datagen as G
from ssvaerr.diffcore import ContractViolation


def test_center_pixel_is_228_for_full_arousal():
    frames = G.render_frames(np.zeros(3), np.ones(3), 64, 64, 0.0, np.random.default_rng(0))
    assert np.all(frames[:, 32, 32] == 228) and np.all(frames[:, 31, 31] == 228)
    assert frames[0, 0, 0] == G.BACKGROUND


def test_zero_valence_is_centered():
    a = np.linspace(-1, 1, 5)
    frames = G.render_frames(np.zeros(5), a, 64, 64, 0.0, np.random.default_rng(0))
    assert np.array_equal(frames, frames[:, :, ::-1])


def test_same_seed_same_bytes(tmp_path):
    cfg = G.SyntheticConfig(num_clips=4, T=10, H=16, W=16, seed=11)
    G.generate(cfg, tmp_path / "a")
    G.generate(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.left_only and not cmp.right_only
    for sub in ("clips", "labels", "features"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        assert all((tmp_path / "a" / sub / n).read_bytes() == (tmp_path / "b" / sub / n).read_bytes() for n in names)
    assert (tmp_path / "a" / "manifest").read_bytes() == (tmp_path / "b" / "manifest").read_bytes()
    G.generate(G.SyntheticConfig(num_clips=4, T=10, H=16, W=16, seed=12), tmp_path / "c")
    assert (tmp_path / "a" / "clips" / "clip_0000.ssva").read_bytes() != (tmp_path / "c" / "clips" / "clip_0000.ssva").read_bytes()


def test_labels_recoverable_by_linear_readout():
    """Ridge readout from (blob intensity, blob x-centroid) to (a, v) on noiseless frames."""
    cfg = G.SyntheticConfig(num_clips=6, noise_std=0.0)
    X, Y = [], []
    for i in range(cfg.num_clips):
        frames, labels, _ = G.make_clip(cfg, i)
        above = frames - G.BACKGROUND
        xs = np.arange(cfg.W)
        intensity = frames.reshape(frames.shape[0], -1).max(axis=1)
        centroid = (above.sum(axis=1) * xs).sum(axis=1) / above.sum(axis=(1, 2))
        X.append(np.stack([intensity, centroid, np.ones_like(intensity)], axis=1))
        Y.append(np.stack([labels.arousal, labels.valence], axis=1))
    X, Y = np.concatenate(X), np.concatenate(Y)
    lam = 1e-6
    W = np.linalg.solve(X.T @ X + lam * np.eye(3), X.T @ Y)
    resid = Y - X @ W
    r2 = 1 - (resid**2).sum(axis=0) / ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    assert np.all(r2 > 0.99), r2


def test_default_split_sizes():
    assert G.split_sizes(56, (0.7, 0.15, 0.15)) == {"train": 40, "val": 8, "test": 8}


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_split_sizes_floor_allocation(n, r_val, r_test):
    sizes = G.split_sizes(n, (1 - r_val - r_test, r_val, r_test))
    assert sizes["val"] == int(np.floor(r_val * n)) and sizes["test"] == int(np.floor(r_test * n))
    assert sum(sizes.values()) == n


def test_generate_manifest(small_data):
    m = small_data
    assert [len(m.split(s)) for s in G.SPLITS] == [10, 1, 1]
    clips = {tuple(str(p) for p in (e.clip_path, e.label_path, e.feature_path)) for e in m.entries}
    assert len(clips) == len(m.entries)
    train = [G.read_clip(e.clip_path) for e in m.split("train")]
    assert (m.mean, m.std) == G.compute_stats(train)
    back = G.DatasetManifest.read(m.path)
    assert back == m
    text = m.path.read_text()
    assert text.startswith("#stats mean=") and "\tclips/clip_0000.ssva\t" in text


def test_manifest_rejects_malformed(tmp_path):
    p = tmp_path / "manifest"
    p.write_text("#stats mean=1.0 std=2.0\nholdout\ta\tb\tc\n")
    with pytest.raises(ValueError):
        G.DatasetManifest.read(p)
    p.write_text("train\ta\tb\tc\n")
    with pytest.raises(ValueError, match="stats"):
        G.DatasetManifest.read(p)


def test_clip_round_trip(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, size=(7, 9, 11)).astype(np.uint8)
    G.write_clip(tmp_path / "c.ssva", frames)
    raw = (tmp_path / "c.ssva").read_bytes()
    assert raw[:4] == b"SSVA" and len(raw) == 20 + frames.size
    assert G.read_clip(tmp_path / "c.ssva").tobytes() == frames.tobytes()
    (tmp_path / "bad.ssva").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        G.read_clip(tmp_path / "bad.ssva")


def test_features_round_trip(tmp_path):
    feats = np.random.default_rng(0).normal(size=(13, 8)).astype(np.float32)
    G.write_features(tmp_path / "f.ssvf", feats)
    assert G.read_features(tmp_path / "f.ssvf").astype(np.float32).tobytes() == feats.tobytes()


def test_loaded_clip_matches_generator(small_data):
    cfg = G.SyntheticConfig(num_clips=12, T=24, seed=3)
    frames, labels, feats = G.make_clip(cfg, 5)
    clip = small_data.load(5, with_features=True)
    assert np.array_equal(clip.frames, frames)
    assert clip.valence.tobytes() == labels.valence.tobytes()
    assert np.allclose(clip.features, feats, atol=1e-6)


def test_acoustic_features_fixed_function():
    v = np.linspace(-1, 1, 9)
    a = v[::-1].copy()
    f = G.acoustic_features(v, a)
    assert f.shape == (9, 8)
    assert np.array_equal(f, G.acoustic_features(v, a))


def _clip(T):
    rng = np.random.default_rng(T)
    return G.LabeledClip(rng.uniform(0, 255, (T, 4, 4)), rng.uniform(-1, 1, T), rng.uniform(-1, 1, T))


def test_segment_whole_clip():
    c = _clip(30)
    s = G.sample_segment(c, 30, np.random.default_rng(99))
    assert s.frames.tobytes() == c.frames.tobytes() and s.mask.all()


def test_segment_padding():
    s = G.sample_segment(_clip(300), 500, np.random.default_rng(0))
    assert s.T == 500 and s.mask.sum() == 300 and not s.mask[300:].any()
    assert not s.frames[300:].any() and not s.valence[300:].any()


def test_segment_window_and_determinism():
    c = _clip(50)
    a = G.sample_segment(c, 20, np.random.default_rng(4))
    b = G.sample_segment(c, 20, np.random.default_rng(4))
    assert a.frames.tobytes() == b.frames.tobytes()
    start = int(np.flatnonzero((c.valence == a.valence[0]))[0])
    assert np.array_equal(c.valence[start : start + 20], a.valence)
    assert np.array_equal(c.frames[start : start + 20], a.frames)
    with pytest.raises(ContractViolation):
        G.sample_segment(c, 0, np.random.default_rng(0))


def test_segment_start_is_uniform():
    c = _clip(12)
    rng = np.random.default_rng(0)
    starts = [int(np.flatnonzero(c.valence == G.sample_segment(c, 10, rng).valence[0])[0]) for _ in range(3000)]
    counts = np.bincount(starts, minlength=3)
    assert counts.size == 3 and np.all(np.abs(counts - 1000) < 150)


def test_stats_examples():
    assert G.compute_stats([np.full((2, 3, 3), 100.0)]) == (100.0, 1e-6)
    two = np.array([0.0, 255.0] * 8).reshape(2, 2, 4)
    mean, std = G.compute_stats([two])
    assert mean == 127.5 and abs(std - 127.5) < 1e-12
    with pytest.raises(ValueError):
        G.compute_stats([])


def test_center_crop_and_normalize():
    x = np.arange(64.0).reshape(1, 8, 8)
    c = G.center_crop(x, 4)
    assert c.shape == (1, 4, 4) and c[0, 0, 0] == x[0, 2, 2]
    with pytest.raises(ContractViolation):
        G.center_crop(x, 9)
    assert np.allclose(G.normalize(np.array([10.0, 30.0]), 20.0, 10.0), [-1.0, 1.0])
