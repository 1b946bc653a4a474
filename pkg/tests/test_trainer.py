import math

import numpy as np
import pytest

from streamhl.core import Config, DatagenConfig, FormatError, Prng, TrainConfig
from streamhl.datagen import Dataset, make_dataset
from streamhl.heads import HeadBatch, HeadWeights, grad_heads, init_heads
from streamhl.stream import build_decoder
from streamhl.trainer import (AdamW, build_windows, clip_by_global_norm, global_norm, load_heads,
                              lr_at, mean_losses, save_heads, train_heads, train_on_windows,
                              video_windows, write_trace)


def small_cfg(**train):
    cfg = Config(data=DatagenConfig(n_videos=5, length=96), train=TrainConfig(**{"steps": 40, **train}))
    return cfg


@pytest.fixture(scope="module")
def setup():
    cfg = small_cfg()
    ds = make_dataset(cfg.data, cfg.decoder.dim, Prng(3))
    dec = build_decoder(cfg)
    windows = build_windows(ds.split("train"), dec, cfg, Prng(4))
    heads = init_heads(dec.hidden, cfg.decoder.vocab, Prng(5))
    return cfg, ds, dec, windows, heads


class TestSchedule:
    def test_examples(self):
        assert lr_at(0, 100, 1.0) == 0.0
        assert lr_at(5, 100, 1.0) == 1.0  # ceil(0.05 * 100) = 5 warmup steps
        assert lr_at(100, 100, 1.0) == pytest.approx(0.0, abs=1e-16)
        assert lr_at(5 + 95 / 2, 100, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert lr_at(2, 100, 1.0) == pytest.approx(0.4)

    def test_monotone_after_warmup(self):
        vals = [lr_at(s, 200, 2e-5) for s in range(10, 201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, 1.0)


class TestOptimizer:
    def test_clip_exact(self):
        g = {"a": np.array([3.0, 4.0]), "b": np.array([[12.0]])}
        clipped, norm = clip_by_global_norm(g, 1.0)
        assert norm == 13.0
        assert global_norm(clipped) == pytest.approx(1.0, abs=1e-15)

    def test_clip_noop_below(self):
        g = {"a": np.array([0.3, 0.4])}
        assert clip_by_global_norm(g, 1.0)[0] is g

    def test_adamw_first_step(self):
        """Bias-corrected first step moves each coordinate by lr * sign(g)."""
        p = {"w": np.array([1.0, -2.0, 0.5])}
        AdamW(0.1).update(p, {"w": np.array([0.3, -5.0, 2.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-8)

    def test_weight_decay_decoupled(self):
        p = {"w": np.array([2.0])}
        AdamW(0.1, weight_decay=0.5).update(p, {"w": np.array([0.0])})
        assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


class TestTraining:
    def test_lr_zero_unchanged(self, setup):
        cfg, _, _, windows, heads = setup
        cfg0 = small_cfg(lr=0.0, steps=10)
        out = train_on_windows(windows, cfg0, heads, Prng(1))
        for k in HeadWeights.PARAMS:
            np.testing.assert_array_equal(getattr(out.heads, k), getattr(heads, k))

    def test_info_loss_halves(self, setup):
        cfg, _, _, windows, heads = setup
        cfg = small_cfg(lr=5e-3, steps=200)
        before = mean_losses(heads, windows, cfg)[0].info
        out = train_on_windows(windows, cfg, heads, Prng(2))
        after = mean_losses(out.heads, windows, cfg)[0].info
        assert after <= 0.5 * before

    def test_trace_deterministic(self, setup):
        cfg, ds, dec, _, _ = setup
        a = train_heads(ds, cfg, dec)
        b = train_heads(ds, cfg, dec)
        assert [(r.total, r.grad_norm, r.lr) for r in a.trace] == [(r.total, r.grad_norm, r.lr) for r in b.trace]
        assert len(a.trace) == cfg.train.steps

    def test_schedule_in_trace(self, setup):
        cfg, _, _, windows, heads = setup
        out = train_on_windows(windows, cfg, heads, Prng(3))
        assert [r.lr for r in out.trace] == [lr_at(s, 40, cfg.train.lr, 0.05) for s in range(1, 41)]
        assert out.trace[-1].lr == 0.0

    def test_empty_dataset(self, setup):
        cfg, ds, dec, _, _ = setup
        with pytest.raises(ValueError):
            train_heads(Dataset([], ds.w_r, ds.w_i), cfg, dec)
        with pytest.raises(ValueError):
            train_on_windows([], cfg, setup[4], Prng(1))

    def test_windows_tile_video(self, setup):
        cfg, ds, dec, windows, _ = setup
        n_train = len(ds.split("train"))
        assert len(windows) == 2 * n_train  # 96 frames -> 64 + 32
        assert [len(w.r) for w in windows[:2]] == [64, 32]
        assert all(w.tv_valid is not None and len(w.tv_valid) == len(w.r) - 1 for w in windows)

    def test_lm_probes_clean_captioned(self, setup):
        cfg, ds, dec, _, _ = setup
        cfg = small_cfg(lm_rate=1.0)
        probed = 0
        for k, v in enumerate(ds.split("train")):
            for w in video_windows(v, dec, cfg, Prng(k)):
                if len(w.lm_targets):
                    probed += 1
                    assert len(w.lm_targets) <= cfg.train.lm_max_tokens
                    assert w.lm_h.shape == (len(w.lm_targets), dec.hidden)
        assert probed > 0

    def test_earlier_window_gradient_causal(self, setup):
        """Rewriting the frames of later windows leaves the first window, and so its gradient, unchanged."""
        cfg, ds, dec, _, heads = setup
        v = ds.split("train")[0]
        a = video_windows(v, dec, cfg, Prng(7))
        v2 = type(v)(**{**v.__dict__, "features": v.features.copy()})
        v2.features[64:] = Prng(8).gauss_array(v.T - 64, v.features.shape[1]) * 10
        b = video_windows(v2, dec, cfg, Prng(7))
        np.testing.assert_array_equal(a[0].h, b[0].h)
        ga, gb = grad_heads(heads, a[0]), grad_heads(heads, b[0])
        for k in HeadWeights.PARAMS:
            np.testing.assert_array_equal(ga[k], gb[k])
        assert not np.array_equal(a[1].h, b[1].h)


class TestCheckpoint:
    def test_round_trip(self, setup, tmp_path):
        heads = setup[4]
        save_heads(tmp_path / "h.bin", heads)
        back = load_heads(tmp_path / "h.bin")
        for k in HeadWeights.PARAMS:
            np.testing.assert_array_equal(getattr(back, k), getattr(heads, k))
        assert (back.l_min, back.l_max, back.delta) == (heads.l_min, heads.l_max, heads.delta)

    def test_corrupt(self, setup, tmp_path):
        save_heads(tmp_path / "h.bin", setup[4])
        blob = (tmp_path / "h.bin").read_bytes()
        for name, data in {"magic": b"XX" + blob[2:], "short": blob[:-8], "long": blob + b"\0"}.items():
            (tmp_path / name).write_bytes(data)
            with pytest.raises(FormatError):
                load_heads(tmp_path / name)

    def test_trace_csv(self, setup, tmp_path):
        cfg, _, _, windows, heads = setup
        out = train_on_windows(windows, small_cfg(steps=3), heads, Prng(1))
        write_trace(tmp_path / "t.csv", out.trace)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,lr,grad_norm,relevance_total,info,uncertainty,lm,total"
        assert len(lines) == 4
