"""Shared setup for the ablation scripts: synthetic data plus one trained head set."""
import numpy as np

from streamhl.cache import CachePolicy
from streamhl.core import Config, DatagenConfig, Prng, TrainConfig
from streamhl.datagen import make_dataset
from streamhl.heads import forward_batch
from streamhl.stream import build_decoder, stream_hidden
from streamhl.trainer import train_heads


def trained(seed: int, steps: int, lr: float, n_videos: int, length: int):
    cfg = Config(seed=seed, train=TrainConfig(steps=steps, lr=lr),
                 data=DatagenConfig(n_videos=n_videos, length=length))
    ds = make_dataset(cfg.data, cfg.decoder.dim, Prng(seed).fork(0xDA7A))
    decoder = build_decoder(cfg)
    res = train_heads(ds, cfg, decoder)
    return cfg, ds, decoder, res.heads


def head_outputs(cfg, decoder, heads, video, policy: CachePolicy | None = None):
    policy = policy or CachePolicy.from_config(cfg.cache)
    trace = stream_hidden(decoder, policy, video.features, video.query, cfg.system_prompt)
    out = forward_batch(heads, trace.hidden)
    out["max_retained"] = np.array(trace.max_retained)
    return out
