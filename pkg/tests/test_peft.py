import numpy as np
import pytest

from ads import tensor as T
from ads.backbone import DualEncoder
from ads.config import ConfigError, ModelConfig
from ads.model import AdsModel, frozen_reference_logits
from ads.peft import LoraPair
from ads.training import freeze_backbone, trainable_param_formula, count_trainable_params

from conftest import central_diff, rel_err


def tiny_cfg(**kw):
    base = dict(L=2, K=1, m=4, patch_dim=6, n=5, vocab_size=16, d_v=8, d_t=12, d=6, heads=2,
                lora_rank=2, prompt_len=3)
    base.update(kw)
    return ModelConfig(**base).validate()


def batch(cfg, b=3):
    rng = np.random.default_rng(0)
    return rng.integers(0, cfg.vocab_size, size=(b, cfg.n)), rng.normal(size=(b, cfg.m, cfg.patch_dim))


def test_lora_b_zero_is_frozen_backbone():
    cfg = tiny_cfg()
    m = AdsModel(DualEncoder(cfg), "LORA", cfg)
    tokens, patches = batch(cfg)
    assert m(tokens, patches).data.tobytes() == frozen_reference_logits(m, tokens, patches).data.tobytes()


def test_prompt_len_zero_is_frozen_backbone():
    cfg = tiny_cfg(prompt_len=0)
    m = AdsModel(DualEncoder(cfg), "PROMPT", cfg)
    tokens, patches = batch(cfg)
    assert m(tokens, patches).data.tobytes() == frozen_reference_logits(m, tokens, patches).data.tobytes()
    freeze_backbone(m)
    assert count_trainable_params(m) == 2 * 2 * cfg.d + 2


def test_lora_rank_one_delta():
    pair = LoraPair(np.random.default_rng(0), 8, 1, "x")
    pair.B.data = np.random.default_rng(1).normal(size=pair.B.shape).astype(pair.B.dtype)
    assert np.linalg.matrix_rank(pair.delta_weight()) <= 1


def test_lora_rank_too_large():
    with pytest.raises(ConfigError):
        LoraPair(np.random.default_rng(0), 4, 4, "x")


def test_lora_effective_weight(f64):
    rng = np.random.default_rng(2)
    pair = LoraPair(rng, 6, 2, "x")
    pair.B.data = rng.normal(size=pair.B.shape)
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(pair(T.Tensor(x)).data, x @ pair.delta_weight(), atol=1e-12)


def test_lora_gradients_match_finite_differences(f64):
    cfg = tiny_cfg(dtype="float64")
    m = AdsModel(DualEncoder(cfg), "LORA", cfg)
    freeze_backbone(m)
    rng = np.random.default_rng(3)
    for p in m.lora.parameters():
        p.data = rng.normal(0, 0.3, size=p.shape)
    tokens, patches = batch(cfg)
    labels = [0, 1, 1]

    def loss():
        return T.cross_entropy_logits(m(tokens, patches), labels)

    T.backward(loss())
    for pair in (m.lora.vision[0]["q"], m.lora.text[1]["v"]):
        for p in pair.parameters():
            g = p.grad.copy()
            with T.no_grad():
                num = central_diff(lambda: float(loss().data), p.data)
            assert rel_err(g, num, floor=1e-6) < 1e-4, p.name


def test_prompt_shapes_and_gradients():
    cfg = tiny_cfg()
    m = AdsModel(DualEncoder(cfg), "PROMPT", cfg)
    freeze_backbone(m)
    tokens, patches = batch(cfg)
    logits = m(tokens, patches)
    assert logits.shape == (3, 2)
    T.backward(T.cross_entropy_logits(logits, [1, 0, 1]))
    assert np.abs(m.prompts.vision.grad).max() > 0
    assert np.abs(m.prompts.text.grad).max() > 0


def test_prompt_lengthens_sequences():
    cfg = tiny_cfg()
    m = AdsModel(DualEncoder(cfg), "PROMPT", cfg)
    tokens, patches = batch(cfg)
    xv, _ = m._vision_start(patches, None)
    xt, _ = m._text_start(tokens, None)
    assert xv.shape[1] == cfg.m + 1 + cfg.prompt_len
    assert xt.shape[1] == cfg.n + cfg.prompt_len


@pytest.mark.parametrize("variant", ["LORA", "PROMPT"])
def test_trainable_sets(variant):
    cfg = tiny_cfg()
    m = AdsModel(DualEncoder(cfg), variant, cfg)
    freeze_backbone(m)
    names = {n for n, p in m.named_parameters() if p.requires_grad}
    prefix = "lora." if variant == "LORA" else "prompt."
    assert all(n.startswith(prefix) or n.startswith("clf.") for n in names)
    assert count_trainable_params(m) == trainable_param_formula(cfg, variant)
