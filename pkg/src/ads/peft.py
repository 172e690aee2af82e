"""LoRA and shallow prompt-tuning baselines on the frozen dual encoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import _param
from .config import ConfigError
from .tensor import Tensor


class LoraPair:
    """Low-rank update ``scale * (x @ A) @ B`` for one projection; ``B`` starts at zero."""

    def __init__(self, rng, width: int, rank: int, name: str):
        if rank >= width:
            raise ConfigError(f"LoRA rank {rank} must be smaller than width {width}")
        self.scale = 1.0 / rank
        self.A = _param(rng, (width, rank), "linear", f"{name}.A", fan_in=width)
        self.B = _param(rng, (rank, width), "zeros", f"{name}.B")

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def __call__(self, x: Tensor) -> Tensor:
        return T.mul(T.matmul(T.matmul(x, self.A), self.B), self.scale)

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)


class LoraParams:
    """LoRA on the query and value projections of every block in both towers."""

    def __init__(self, rng, cfg):
        self.rank = cfg.lora_rank
        self.vision = [{p: LoraPair(rng, cfg.d_v, cfg.lora_rank, f"lora.vision.block{i + 1}.{p}") for p in "qv"}
                       for i in range(cfg.L)]
        self.text = [{p: LoraPair(rng, cfg.d_t, cfg.lora_rank, f"lora.text.block{i + 1}.{p}") for p in "qv"}
                     for i in range(cfg.L)]

    def parameters(self) -> list[Tensor]:
        out = []
        for tower in (self.vision, self.text):
            for block in tower:
                out += block["q"].parameters() + block["v"].parameters()
        return out


class PromptParams:
    """``p`` learnable virtual tokens per tower, prepended to the layer-1 input."""

    def __init__(self, rng, cfg):
        self.length = cfg.prompt_len
        self.vision = _param(rng, (cfg.prompt_len, cfg.d_v), "embed", "prompt.vision")
        self.text = _param(rng, (cfg.prompt_len, cfg.d_t), "embed", "prompt.text")

    def parameters(self) -> list[Tensor]:
        return [self.vision, self.text] if self.length else []

    @staticmethod
    def prepend(prompt: Tensor, x: Tensor) -> Tensor:
        p = prompt.shape[0]
        if p == 0:
            return x
        b, _, w = x.shape
        return T.concat([T.broadcast_to(T.reshape(prompt, (1, p, w)), (b, p, w)), x], axis=1)
