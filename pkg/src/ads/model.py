"""Full classifier: dual encoder + variant-specific trainable parts + linear head.

Variants
--------
``ADS``          adapters in layers K..L of both towers, text states guide vision
``V2T``          same adapters, vision states guide text
``NO_SHARING``   adapters in both towers, no cross-modal state sharing
``NO_ADAPTERS``  frozen towers, only projections and classifier
``LORA``         low-rank updates on q/v of every block
``PROMPT``       learnable virtual tokens prepended to both towers
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import DualEncoder, Linear
from .config import VARIANTS, ConfigError, ModelConfig
from .peft import LoraParams, PromptParams
from .sharing import Adapter, SharingParams, StateQueue, broadcast_guidance
from .tensor import Tensor

ADAPTER_VARIANTS = ("ADS", "V2T", "NO_SHARING")


@dataclass
class ForwardTrace:
    """Diagnostics collected during one forward pass (numpy copies)."""
    attention: dict[int, np.ndarray] = field(default_factory=dict)
    text_adapter_norms: dict[int, np.ndarray] = field(default_factory=dict)
    vision_adapter_norms: dict[int, np.ndarray] = field(default_factory=dict)
    h_text: np.ndarray | None = None
    h_vision: np.ndarray | None = None


class AdsModel:
    def __init__(self, backbone: DualEncoder, variant: str = "ADS", cfg: ModelConfig | None = None,
                 rng: np.random.Generator | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.backbone = backbone
        self.cfg = (cfg or backbone.cfg).validate()
        for name in ("L", "m", "n", "patch_dim", "vocab_size", "d_v", "d_t", "d", "heads", "mlp_ratio"):
            if getattr(self.cfg, name) != getattr(backbone.cfg, name):
                raise ConfigError(f"model config field {name} disagrees with the backbone")
        self.variant = variant
        cfg = self.cfg
        rng = rng if rng is not None else T.make_rng(cfg.seed, "head", variant)
        self.clf = Linear(rng, 2 * cfg.d, 2, "clf")
        self.text_adapters: dict[int, Adapter] = {}
        self.vision_adapters: dict[int, Adapter] = {}
        self.sharing_params: SharingParams | None = None
        self.lora: LoraParams | None = None
        self.prompts: PromptParams | None = None

        if variant in ADAPTER_VARIANTS:
            for layer in cfg.adapted_layers:
                self.text_adapters[layer] = Adapter(rng, cfg.d_t, cfg.adapter_dim, f"adapter.text.layer{layer}")
                self.vision_adapters[layer] = Adapter(rng, cfg.d_v, cfg.adapter_dim, f"adapter.vision.layer{layer}")
            if self.sharing == "T2V":
                self.sharing_params = SharingParams(rng, cfg.d_t, cfg.d_v)
            elif self.sharing == "V2T":
                self.sharing_params = SharingParams(rng, cfg.d_v, cfg.d_t)
        elif variant == "LORA":
            self.lora = LoraParams(rng, cfg)
        elif variant == "PROMPT":
            self.prompts = PromptParams(rng, cfg)

    # -- structure -----------------------------------------------------
    @property
    def sharing(self) -> str:
        return {"ADS": self.cfg.sharing, "V2T": "V2T"}.get(self.variant, "NONE")

    def extra_parameters(self) -> list[Tensor]:
        """Parameters that exist on top of the backbone."""
        out = []
        for layer in sorted(self.text_adapters):
            out += self.text_adapters[layer].parameters()
        for layer in sorted(self.vision_adapters):
            out += self.vision_adapters[layer].parameters()
        if self.sharing_params is not None:
            out += self.sharing_params.parameters()
        if self.lora is not None:
            out += self.lora.parameters()
        if self.prompts is not None:
            out += self.prompts.parameters()
        return out + self.clf.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.named_parameters() + [(p.name, p) for p in self.extra_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    @property
    def prefix_layers(self) -> int:
        """Number of leading blocks whose outputs depend only on frozen tensors."""
        if self.variant in ADAPTER_VARIANTS:
            return self.cfg.K - 1
        if self.variant == "NO_ADAPTERS":
            return self.cfg.L
        return 0

    # -- forward -------------------------------------------------------
    def compute_prefix(self, tokens, patches) -> tuple[np.ndarray, np.ndarray]:
        """Residual streams entering block ``prefix_layers + 1`` of each tower."""
        k = self.prefix_layers
        bb = self.backbone
        with T.no_grad():
            xt = bb.text.embed(tokens)
            for blk in bb.text.blocks[:k]:
                xt = blk(xt)
            xv = bb.vision.embed(patches)
            for blk in bb.vision.blocks[:k]:
                xv = blk(xv)
        return xt.data, xv.data

    def _text_start(self, tokens, prefix):
        if prefix is not None:
            return Tensor(prefix[0]), self.prefix_layers
        x = self.backbone.text.embed(tokens)
        if self.prompts is not None:
            x = PromptParams.prepend(self.prompts.text, x)
        return x, 0

    def _vision_start(self, patches, prefix):
        if prefix is not None:
            return Tensor(prefix[1]), self.prefix_layers
        x = self.backbone.vision.embed(patches)
        if self.prompts is not None:
            x = PromptParams.prepend(self.prompts.vision, x)
        return x, 0

    def _run_tower(self, tower, x, start, adapters, pool, source_queue, guide_queue, trace_norms, trace):
        """Run blocks ``start..L-1`` with adapters, pushing pooled states and consuming guidance."""
        cfg = self.cfg
        lora = None
        if self.lora is not None:
            lora = self.lora.vision if tower is self.backbone.vision else self.lora.text
        for i in range(start, cfg.L):
            layer = i + 1
            blk = tower.blocks[i]
            y = blk(x, lora[i] if lora is not None else None)
            adapter = adapters.get(layer)
            if adapter is not None:
                a = adapter(x)
                y = y + T.mul(a, cfg.alpha)
                pooled = a[:, pool, :]
                if source_queue is not None:
                    source_queue.push(pooled)
                if guide_queue is not None:
                    g, att = self.sharing_params.guidance(guide_queue, pooled)
                    y = y + T.mul(broadcast_guidance(g, y.shape[1], cfg.f_broadcast, pool), cfg.gamma)
                    if trace is not None:
                        trace.attention[layer] = att.data.copy()
                if trace is not None:
                    trace_norms[layer] = np.linalg.norm(a.data, axis=-1).mean(axis=-1)
            x = y
        return x

    def forward(self, tokens, patches, prefix=None, trace: ForwardTrace | None = None) -> Tensor:
        """Logits ``(batch, 2)``.  ``prefix`` replaces the frozen leading blocks (see compute_prefix)."""
        bb, cfg = self.backbone, self.cfg
        sharing = self.sharing
        p = self.prompts.length if self.prompts is not None else 0
        text_pool, vision_pool = -1, p
        tq = vq = None
        norms_t = trace.text_adapter_norms if trace is not None else None
        norms_v = trace.vision_adapter_norms if trace is not None else None

        def run_text(guide):
            x, start = self._text_start(tokens, prefix)
            return self._run_tower(bb.text, x, start, self.text_adapters, text_pool, tq, guide, norms_t, trace)

        def run_vision(guide):
            x, start = self._vision_start(patches, prefix)
            return self._run_tower(bb.vision, x, start, self.vision_adapters, vision_pool, vq, guide, norms_v, trace)

        if sharing == "T2V":
            tq = StateQueue(cfg.queue_len)
            xt = run_text(None)
            assert tq.full, "text tower must complete before vision reads the queue"
            xv = run_vision(tq)
        elif sharing == "V2T":
            vq = StateQueue(cfg.queue_len)
            xv = run_vision(None)
            assert vq.full, "vision tower must complete before text reads the queue"
            xt = run_text(vq)
        else:
            xt = run_text(None)
            xv = run_vision(None)

        h_t = bb.text.head(xt, text_pool)
        h_v = bb.vision.head(xv, vision_pool)
        if trace is not None:
            trace.h_text, trace.h_vision = h_t.data.copy(), h_v.data.copy()
        return self.clf(T.concat([h_t, h_v], axis=-1))

    __call__ = forward


def frozen_reference_logits(model: AdsModel, tokens, patches) -> Tensor:
    """Plain frozen backbone + the model's classifier (no adapters, LoRA or prompts)."""
    bb = model.backbone
    h_t = bb.text_forward(tokens)
    h_v = bb.vision_forward(patches)
    return model.clf(T.concat([h_t, h_v], axis=-1))
