import numpy as np
import pytest

from ads import checkpoint
from ads import tensor as T
from ads.backbone import DualEncoder
from ads.checkpoint import CheckpointError
from ads.config import ModelConfig
from ads.model import AdsModel
from ads.training import freeze_backbone


def tiny_cfg(**kw):
    base = dict(L=2, K=1, m=4, patch_dim=6, n=5, vocab_size=16, d_v=8, d_t=12, d=6, heads=2)
    base.update(kw)
    return ModelConfig(**base).validate()


def trained_like(variant="ADS", **kw):
    cfg = tiny_cfg(**kw)
    m = AdsModel(DualEncoder(cfg), variant, cfg)
    freeze_backbone(m)
    rng = np.random.default_rng(0)
    for p in m.extra_parameters():
        p.data = p.data + rng.normal(0, 0.1, size=p.shape).astype(p.dtype)
    return m


def inputs(cfg, b=100):
    rng = np.random.default_rng(1)
    return rng.integers(0, cfg.vocab_size, size=(b, cfg.n)), rng.normal(size=(b, cfg.m, cfg.patch_dim))


@pytest.mark.parametrize("variant", ["ADS", "V2T", "NO_SHARING", "NO_ADAPTERS", "LORA", "PROMPT"])
def test_round_trip_logits_bitwise(tmp_path, variant):
    m = trained_like(variant)
    tokens, patches = inputs(m.cfg)
    path = tmp_path / "m.ads1"
    checkpoint.save(path, m)
    back = checkpoint.load(path)
    assert back.variant == variant
    assert back(tokens, patches).data.tobytes() == m(tokens, patches).data.tobytes()
    assert [(n, p.requires_grad) for n, p in back.named_parameters()] == \
           [(n, p.requires_grad) for n, p in m.named_parameters()]
    assert checkpoint.dumps(back) == path.read_bytes()


def test_float64_round_trip(tmp_path):
    with T.precision("float64"):
        m = trained_like(dtype="float64")
        tokens, patches = inputs(m.cfg, 5)
        checkpoint.save(tmp_path / "m.ads1", m)
        back = checkpoint.load(tmp_path / "m.ads1")
        assert back.clf.weight.dtype == np.float64
        assert back(tokens, patches).data.tobytes() == m(tokens, patches).data.tobytes()


def test_backbone_only(tmp_path):
    bb = DualEncoder(tiny_cfg())
    checkpoint.save(tmp_path / "b.ads1", bb, {"note": "x"})
    back = checkpoint.load(tmp_path / "b.ads1")
    assert isinstance(back, DualEncoder)
    assert checkpoint.header_of(tmp_path / "b.ads1")["meta"] == {"note": "x"}


def test_bad_magic_and_truncation():
    blob = checkpoint.dumps(trained_like())
    with pytest.raises(CheckpointError, match="ADS1"):
        checkpoint.loads(b"ADS0" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.loads(blob[:-3])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(blob[:4] + b"\x07\x00" + blob[6:])


def test_config_mismatch():
    blob = checkpoint.dumps(trained_like())
    with pytest.raises(CheckpointError, match="mismatch"):
        checkpoint.loads(blob, expect_config=tiny_cfg(d=4))
