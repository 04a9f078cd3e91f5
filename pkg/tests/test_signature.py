import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvface.errors import DimensionError, FormatError, LayoutError
from uvface.lifting import LiftedTexture, MaskState, OcclusionMask
from uvface.signature import (
    FEATURE_DIM,
    GradientHistogramExtractor,
    Preset,
    Signature,
    default_descriptor,
    encode_occlusion,
    extract_signature,
    make_layout,
)

RES = (256, 256)


def mask_from(visible: np.ndarray) -> OcclusionMask:
    return OcclusionMask(np.where(visible, MaskState.VISIBLE, MaskState.SELF_OCCLUDED).astype(np.uint8))


def texture(seed=0, res=RES):
    return LiftedTexture(np.random.default_rng(seed).random(res + (1,)))


def overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return max(0, min(ax + aw, bx + bw) - max(ax, bx)), max(0, min(ay + ah, by + bh) - max(ay, by))


class TestLayout:
    def test_prfs_tiles(self):
        lay = make_layout(Preset.PRFS_64, RES)
        assert len(lay) == 64 and all(p[2:] == (32, 32) for p in lay.patches)
        cover = np.zeros(RES, int)
        for i in range(64):
            cover[lay.slices(i)] += 1
        assert (cover == 1).all()

    def test_dprfs_overlap(self):
        lay = make_layout(Preset.DPRFS_8, RES)
        assert len(lay) == 8
        for r in range(2):
            row = lay.patches[4 * r : 4 * r + 4]
            for a, b in zip(row, row[1:]):
                ox, oy = overlap(a, b)
                assert ox == a[2] // 4 and oy == a[3]
        top, bottom = lay.patches[0], lay.patches[4]
        assert overlap(top, bottom)[1] == top[3] // 4
        for x, y, w, h in lay.patches:
            assert 0 <= x and x + w <= 256 and 0 <= y and y + h <= 256

    def test_indivisible(self):
        with pytest.raises(LayoutError):
            make_layout(Preset.PRFS_64, (100, 100))


class TestEncodeOcclusion:
    def test_all_visible(self):
        enc = encode_occlusion(mask_from(np.ones(RES, bool)), make_layout("PRFS_64", RES))
        assert (enc.fractions == 1.0).all() and enc.flags.all()

    def test_all_occluded(self):
        enc = encode_occlusion(mask_from(np.zeros(RES, bool)), make_layout("PRFS_64", RES))
        assert (enc.fractions == 0.0).all() and not enc.flags.any()

    def test_forty_percent(self):
        # 320x320 gives 40x40 patches, so 40% is a whole number of pixels.
        res = (320, 320)
        vis = np.zeros(res, bool)
        vis[:16, :40] = True
        enc = encode_occlusion(mask_from(vis), make_layout("PRFS_64", res), threshold=0.5)
        assert enc.fractions[0] == 0.4 and not enc.flags[0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_matches_pixel_counts(self, seed, threshold):
        rng = np.random.default_rng(seed)
        vis = rng.random((64, 64)) < rng.random()
        z = mask_from(vis)
        for preset in (Preset.PRFS_64, Preset.DPRFS_8):
            lay = make_layout(preset, (64, 64))
            enc = encode_occlusion(z, lay, threshold)
            for i, (x, y, w, h) in enumerate(lay.patches):
                count = sum(int(vis[r, c]) for r in range(y, y + h) for c in range(x, x + w))
                assert enc.fractions[i] == count / (w * h)
                assert enc.flags[i] == (count / (w * h) >= threshold)

    def test_size_mismatch(self):
        with pytest.raises(LayoutError):
            encode_occlusion(mask_from(np.ones((64, 64), bool)), make_layout("PRFS_64", RES))


def naive_descriptor(patch, mask, cells=4, bins=8):
    """Per-pixel loop: central/one-sided differences, masked, soft-binned orientation."""
    h, w = patch.shape
    hist = np.zeros(cells * cells * bins)
    for r in range(h):
        for c in range(w):
            usable = mask[r, c] and all(
                mask[rr, cc] for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)) if 0 <= rr < h and 0 <= cc < w
            )
            if not usable:
                continue
            if w == 1:
                gx = 0.0
            elif c == 0:
                gx = patch[r, 1] - patch[r, 0]
            elif c == w - 1:
                gx = patch[r, c] - patch[r, c - 1]
            else:
                gx = (patch[r, c + 1] - patch[r, c - 1]) / 2
            if h == 1:
                gy = 0.0
            elif r == 0:
                gy = patch[1, c] - patch[0, c]
            elif r == h - 1:
                gy = patch[r, c] - patch[r - 1, c]
            else:
                gy = (patch[r + 1, c] - patch[r - 1, c]) / 2
            mag = np.hypot(gx, gy)
            angle = np.arctan2(gy, gx) % (2 * np.pi)
            pos = angle / (2 * np.pi / bins)
            b0 = int(np.floor(pos)) % bins
            frac = pos - np.floor(pos)
            cell = (r * cells // h) * cells + (c * cells // w)
            hist[cell * bins + b0] += mag * (1 - frac)
            hist[cell * bins + (b0 + 1) % bins] += mag * frac
    out = np.zeros(FEATURE_DIM)
    if np.linalg.norm(hist) == 0:
        out[0] = 1.0
    else:
        out[: len(hist)] = hist / np.linalg.norm(hist)
    return out


class TestDescriptor:
    def test_uniform_patch(self):
        v = default_descriptor(np.full((32, 32), 0.3), np.ones((32, 32), bool))
        expected = np.zeros(FEATURE_DIM)
        expected[0] = 1.0
        assert np.array_equal(v, expected)

    def test_deterministic(self):
        patch = np.random.default_rng(3).random((32, 32))
        m = np.ones((32, 32), bool)
        assert default_descriptor(patch, m).tobytes() == default_descriptor(patch.copy(), m.copy()).tobytes()

    def test_vertical_edge(self):
        patch = np.zeros((32, 32))
        patch[:, 16:] = 1.0
        mask = np.ones((32, 32), bool)
        v = default_descriptor(patch, mask)
        assert np.allclose(v, naive_descriptor(patch, mask), atol=1e-12)
        hist = v[:128].reshape(16, 8)
        # A dark-to-bright vertical edge has a +x gradient: orientation bin 0 only.
        assert hist[:, 0].sum() > 0.999 * hist.sum()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
    def test_matches_naive_oracle(self, seed, h, w):
        rng = np.random.default_rng(seed)
        patch = rng.random((h, w))
        mask = rng.random((h, w)) < 0.85
        assert np.allclose(default_descriptor(patch, mask), naive_descriptor(patch, mask), atol=1e-12)


class TestExtract:
    def test_fully_visible(self):
        lay = make_layout("PRFS_64", RES)
        sig = extract_signature(texture(), mask_from(np.ones(RES, bool)), lay)
        assert sig.features.shape == (64, 1024)
        assert np.allclose(np.linalg.norm(sig.features, axis=1), 1.0, atol=1e-6)

    def test_fully_occluded(self):
        sig = extract_signature(texture(), mask_from(np.zeros(RES, bool)), make_layout("DPRFS_8", RES))
        assert sig.features.shape == (8, 1024)
        assert not sig.features.any() and not sig.flags.any()

    def test_single_occluded_patch(self):
        lay = make_layout("PRFS_64", RES)
        t = texture(5)
        full = extract_signature(t, mask_from(np.ones(RES, bool)), lay)
        vis = np.ones(RES, bool)
        vis[lay.slices(9)] = False
        part = extract_signature(t, mask_from(vis), lay)
        assert not part.features[9].any()
        others = np.arange(64) != 9
        assert np.array_equal(part.features[others], full.features[others])

    def test_locality(self):
        lay = make_layout("PRFS_64", RES)
        t = texture(6)
        z = mask_from(np.random.default_rng(2).random(RES) < 0.9)
        base = extract_signature(t, z, lay)
        values = t.values.copy()
        keep = np.zeros(RES, bool)
        keep[lay.slices(20)] = True
        values[~keep] = np.random.default_rng(3).random(values[~keep].shape)
        moved = extract_signature(LiftedTexture(values), z, lay)
        assert np.array_equal(moved.features[20], base.features[20])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            extract_signature(texture(), mask_from(np.ones(RES, bool)), make_layout("PRFS_64", RES),
                              extractor=GradientHistogramExtractor(dim=512))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
    def test_rows_unit_or_zero_and_threshold_monotone(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        vis = rng.random((64, 64)) < rng.uniform(0.2, 0.9)
        lay = make_layout("PRFS_64", (64, 64))
        t = LiftedTexture(rng.random((64, 64, 1)))
        a = extract_signature(t, mask_from(vis), lay, threshold=lo)
        b = extract_signature(t, mask_from(vis), lay, threshold=hi)
        assert (a.flags | ~b.flags).all()
        for sig in (a, b):
            norms = np.linalg.norm(sig.features.astype(np.float64), axis=1)
            assert np.all((np.abs(norms - 1) < 1e-6) | (norms == 0))
            assert np.array_equal(norms > 0, sig.flags)


class TestSignatureFile:
    def test_bytes_round_trip(self, tmp_path):
        lay = make_layout("DPRFS_8", RES)
        z = mask_from(np.random.default_rng(0).random(RES) < 0.6)
        sig = extract_signature(texture(1), z, lay, threshold=0.3)
        sig.save(tmp_path / "a.sig")
        raw = (tmp_path / "a.sig").read_bytes()
        back = Signature.load(tmp_path / "a.sig")
        assert back.same_content(sig)
        assert back.to_bytes() == raw
        assert raw[:4] == b"URSG" and len(raw) == 4 + 2 + 1 + 2 + 2 + 4 + 8 * 4 + 8 + 8 * 1024 * 4
        assert not list(tmp_path.glob("*.tmp"))

    def test_corrupt(self):
        sig = Signature(Preset.PRFS_64, np.zeros((64, 1024)), np.zeros(64), np.zeros(64, bool), 0.5)
        raw = sig.to_bytes()
        with pytest.raises(FormatError):
            Signature.from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            Signature.from_bytes(raw[:-1])
