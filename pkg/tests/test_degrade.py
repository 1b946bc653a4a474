import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from streamhl.core import FormatError, Prng
from streamhl.degrade import (DEGRADING_MODES, MAX_BLACKOUT_RUN, Raster, apply_mode, bilinear_resize,
                              blackout, block_noise, color_banding, degraded_count_bounds,
                              gaussian_blur, gaussian_kernel, plan_dropout, quality_degradation,
                              read_ppm, write_ppm)

GOLDEN = Path(__file__).parent / "golden"


def random_raster(seed, w=70, h=66):
    rng = np.random.default_rng(seed)
    return Raster.from_array(rng.integers(0, 256, size=(h, w, 3)))


def all_values():
    v = np.arange(256, dtype=np.uint8)
    return Raster.from_array(np.stack([v, v[::-1], v], axis=-1).reshape(16, 16, 3))


@pytest.fixture(scope="module")
def meta():
    return json.loads((GOLDEN / "meta.json").read_text())


@pytest.fixture(scope="module")
def frame():
    return read_ppm(GOLDEN / "input.ppm")


class TestGolden:
    def outputs(self, frame, meta):
        seed = meta["block_noise_seed"]
        return {
            "color_banding": color_banding(frame, 64),
            "blackout": blackout(frame),
            "block_noise": block_noise(frame, Prng(seed)),
            "block_noise_p05": block_noise(frame, Prng(seed), p=0.5),
            "quality": quality_degradation(frame),
        }

    def test_every_case_byte_exact(self, frame, meta, tmp_path):
        out = self.outputs(frame, meta)
        assert sorted(out) == meta["cases"]
        for name, r in out.items():
            write_ppm(tmp_path / f"{name}.ppm", r)
            assert (tmp_path / f"{name}.ppm").read_bytes() == (GOLDEN / f"{name}.ppm").read_bytes(), name

    def test_input_regenerates(self, meta, tmp_path):
        import importlib.util
        loc = importlib.util.spec_from_file_location(
            "make_golden", Path(__file__).parent.parent / "scripts" / "make_golden.py")
        mod = importlib.util.module_from_spec(loc)
        loc.loader.exec_module(mod)
        write_ppm(tmp_path / "in.ppm", mod.golden_input())
        assert (tmp_path / "in.ppm").read_bytes() == (GOLDEN / "input.ppm").read_bytes()

    def test_golden_block_noise_replaced_something(self, frame):
        out = read_ppm(GOLDEN / "block_noise_p05.ppm")
        assert (out.pixels != frame.pixels).any()


class TestColorBanding:
    def test_examples(self):
        px = Raster.from_array(np.array([[[130, 255, 63]]]))
        assert color_banding(px, 64).pixels.tolist() == [[[128, 192, 0]]]

    @pytest.mark.parametrize("q", [1, 2, 7, 32, 64, 100, 255, 256])
    def test_exhaustive(self, q):
        out = color_banding(all_values(), q).pixels.astype(int)
        src = all_values().pixels.astype(int)
        assert (out == src // q * q).all()
        assert (out <= src).all() and (src - out < q).all()
        assert (out % q == 0).all()

    def test_idempotent(self):
        once = color_banding(random_raster(1))
        assert color_banding(once) == once

    def test_bad_q(self):
        with pytest.raises(ValueError):
            color_banding(all_values(), 0)


def test_blackout():
    out = blackout(random_raster(2))
    assert out.pixels.max() == 0 and out.pixels.shape == (66, 70, 3)
    assert blackout(out) == out


class TestBlockNoise:
    def test_p0_unchanged(self):
        f = random_raster(3)
        assert block_noise(f, Prng(1), p=0.0) == f

    def test_p1_tile_crop(self):
        f = random_raster(4)
        out = block_noise(f, Prng(9), p=1.0).pixels
        tile = out[:32, :32]
        assert tile.max() <= 49
        np.testing.assert_array_equal(out[64:66, 64:70], tile[:2, :6])
        np.testing.assert_array_equal(out[32:64, 32:64], tile)

    def test_tile_draw_order(self):
        rng = Prng(5)
        expect = np.array([rng.randint(50) for _ in range(32 * 32 * 3)]).reshape(32, 32, 3)
        out = block_noise(random_raster(5, 32, 32), Prng(5), p=1.0)
        np.testing.assert_array_equal(out.pixels, expect)

    def test_replacement_rate(self):
        f = Raster.from_array(np.full((800, 400, 3), 200))  # 25 * 13 = 325 blocks per frame
        hits = total = 0
        for s in range(31):
            changed = block_noise(f, Prng(s), block=32).pixels[::32, ::32, 0] != 200
            hits += int(changed.sum())
            total += changed.size
        assert total >= 10_000
        assert abs(hits / total - 0.1) <= 0.02


class TestQuality:
    def test_constant_frame(self):
        f = Raster.from_array(np.full((70, 90, 3), 137))
        assert quality_degradation(f) == f

    def test_too_small(self):
        with pytest.raises(ValueError):
            quality_degradation(random_raster(6, 63, 80))

    def test_kernel(self):
        k = gaussian_kernel()
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k[::-1], atol=0)
        assert np.argmax(k) == 2

    def test_bilinear_oracle(self):
        img = np.random.default_rng(7).random((23, 17, 3))
        out = bilinear_resize(img, 11, 29)
        for oy in range(11):
            for ox in range(29):
                np.testing.assert_allclose(out[oy, ox], oracles.bilinear_pixel(img, oy, ox, 11, 29), atol=1e-12)

    def test_bilinear_identity(self):
        img = np.random.default_rng(8).random((9, 12, 3))
        np.testing.assert_allclose(bilinear_resize(img, 9, 12), img, atol=1e-15)

    def test_blur_oracle(self):
        img = np.random.default_rng(9).random((12, 10, 3)) * 255
        k = gaussian_kernel()
        np.testing.assert_allclose(gaussian_blur(img), oracles.blur_direct(img, np.outer(k, k)), atol=1e-9)

    def test_smooths(self):
        f = random_raster(10, 96, 96)
        out = quality_degradation(f).pixels.astype(float)
        assert np.abs(np.diff(out, axis=1)).mean() < 0.5 * np.abs(np.diff(f.pixels.astype(float), axis=1)).mean()


class TestPPM:
    def test_round_trip(self, tmp_path):
        f = random_raster(11)
        write_ppm(tmp_path / "a.ppm", f)
        assert read_ppm(tmp_path / "a.ppm") == f

    def test_header_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
        assert read_ppm(tmp_path / "c.ppm").pixels.ravel().tolist() == list(range(6))

    @pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n" + bytes(5),
                                      b"P6\n1 1\n65535\n" + bytes(6), b"P6\nx 1\n255\n" + bytes(3), b"P6\n1"])
    def test_malformed(self, tmp_path, blob):
        (tmp_path / "b.ppm").write_bytes(blob)
        with pytest.raises(FormatError):
            read_ppm(tmp_path / "b.ppm")


def test_apply_mode():
    f = random_raster(12)
    assert apply_mode(f, "none", Prng(1)) is f
    assert apply_mode(f, "blackout", Prng(1)) == blackout(f)
    with pytest.raises(ValueError):
        apply_mode(f, "sepia", Prng(1))


class TestDropoutPlan:
    @pytest.mark.parametrize("T", [20, 100, 257, 1000])
    def test_thousand_seeds(self, T):
        lo, hi = degraded_count_bounds(T)
        for seed in range(1000):
            plan = plan_dropout(T, Prng(seed))
            k = int(plan.mask.sum())
            assert lo <= k <= hi
            assert 0.05 <= k / T <= 0.20
            assert max(plan.blackout_runs(), default=0) <= MAX_BLACKOUT_RUN

    def test_single_frame(self):
        assert plan_dropout(1, Prng(1)).mask.tolist() == [True]

    def test_zero_length(self):
        with pytest.raises(ValueError):
            plan_dropout(0, Prng(1))

    def test_all_modes_used(self):
        seen = {m for s in range(200) for m in plan_dropout(60, Prng(s)).modes}
        assert seen == {"none", *DEGRADING_MODES}

    def test_mask_line(self):
        plan = plan_dropout(40, Prng(3))
        line = plan.mask_line()
        assert len(line) == 40 and set(line) <= {"0", "1"}
        assert line.count("1") == int(plan.mask.sum())

    @given(st.integers(5, 400), st.integers(0, 2**40))
    def test_property(self, T, seed):
        plan = plan_dropout(T, Prng(seed))
        k = int(plan.mask.sum())
        assert 0.05 * T <= k + 1e-9 and k <= 0.20 * T + 1e-9
        assert max(plan.blackout_runs(), default=0) <= MAX_BLACKOUT_RUN
        assert plan == plan_dropout(T, Prng(seed))
