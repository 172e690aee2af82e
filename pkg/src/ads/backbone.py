"""Miniature CLIP-style dual encoder: a vision tower over patch features and a
text tower over token ids, each projecting into a shared space."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


def _param(rng: np.random.Generator, shape, kind: str, name: str, fan_in: int | None = None) -> Tensor:
    dt = T.get_dtype()
    if kind == "linear":
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    elif kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "embed":
        data = rng.normal(0.0, 0.5, size=shape)
    else:
        raise ValueError(kind)
    return Tensor(data.astype(dt), requires_grad=True, name=name)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str):
        self.weight = _param(rng, (d_in, d_out), "linear", f"{name}.weight", fan_in=d_in)
        self.bias = _param(rng, (d_out,), "zeros", f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, width: int, name: str):
        self.gain = _param(None, (width,), "ones", f"{name}.gain")
        self.bias = _param(None, (width,), "zeros", f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias)

    def parameters(self):
        return [self.gain, self.bias]


class TransformerBlock:
    """Pre-LN block: ``h = x + attn(ln1(x)); out = h + mlp(ln2(h))``.

    ``lora`` optionally maps ``"q"``/``"v"`` to a callable returning the
    low-rank update for that projection's input.
    """

    def __init__(self, rng, width: int, heads: int, mlp_ratio: int, name: str):
        self.width, self.heads = width, heads
        self.ln1 = LayerNorm(width, f"{name}.ln1")
        self.q = Linear(rng, width, width, f"{name}.attn.q")
        self.k = Linear(rng, width, width, f"{name}.attn.k")
        self.v = Linear(rng, width, width, f"{name}.attn.v")
        self.out = Linear(rng, width, width, f"{name}.attn.out")
        self.ln2 = LayerNorm(width, f"{name}.ln2")
        self.fc1 = Linear(rng, width, width * mlp_ratio, f"{name}.mlp.fc1")
        self.fc2 = Linear(rng, width * mlp_ratio, width, f"{name}.mlp.fc2")

    def parameters(self):
        mods = (self.ln1, self.q, self.k, self.v, self.out, self.ln2, self.fc1, self.fc2)
        return [p for m in mods for p in m.parameters()]

    def attention(self, x: Tensor, lora=None) -> Tensor:
        b, s, w = x.shape
        h, dh = self.heads, w // self.heads
        q, k, v = self.q(x), self.k(x), self.v(x)
        if lora is not None:
            q = q + lora["q"](x)
            v = v + lora["v"](x)

        def split(t):
            return T.transpose(T.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, w))
        return self.out(ctx)

    def __call__(self, x: Tensor, lora=None) -> Tensor:
        h = x + self.attention(self.ln1(x), lora)
        return h + self.fc2(T.gelu(self.fc1(self.ln2(h))))


class _Tower:
    pool_index: int
    blocks: list
    ln_final: LayerNorm
    proj: Tensor

    def head(self, x: Tensor, pool_index: int | None = None) -> Tensor:
        """Final layernorm on the pooled position, then the shared-space projection."""
        idx = self.pool_index if pool_index is None else pool_index
        return T.matmul(self.ln_final(x[:, idx, :]), self.proj)

    def block_parameters(self):
        return [p for blk in self.blocks for p in blk.parameters()]


class VisionTower(_Tower):
    pool_index = 0

    def __init__(self, rng, cfg: ModelConfig):
        self.m, self.patch_dim, self.width = cfg.m, cfg.patch_dim, cfg.d_v
        self.patch_proj = Linear(rng, cfg.patch_dim, cfg.d_v, "vision.patch_proj")
        self.class_token = _param(rng, (cfg.d_v,), "embed", "vision.class_token")
        self.pos = _param(rng, (cfg.m + 1, cfg.d_v), "embed", "vision.pos")
        self.blocks = [TransformerBlock(rng, cfg.d_v, cfg.heads, cfg.mlp_ratio, f"vision.block{i + 1}")
                       for i in range(cfg.L)]
        self.ln_final = LayerNorm(cfg.d_v, "vision.ln_final")
        self.proj = _param(rng, (cfg.d_v, cfg.d), "linear", "vision.proj", fan_in=cfg.d_v)

    def embed(self, patches) -> Tensor:
        """Project patches, prepend the class token and add positional embeddings."""
        patches = np.asarray(patches)
        if patches.ndim != 3 or patches.shape[1:] != (self.m, self.patch_dim):
            raise ValueError(f"expected patches of shape (B, {self.m}, {self.patch_dim}), got {patches.shape}")
        b = patches.shape[0]
        x = self.patch_proj(Tensor(patches))
        cls = T.broadcast_to(T.reshape(self.class_token, (1, 1, self.width)), (b, 1, self.width))
        return T.concat([cls, x], axis=1) + self.pos

    def embedding_parameters(self):
        return self.patch_proj.parameters() + [self.class_token, self.pos]


class TextTower(_Tower):
    pool_index = -1

    def __init__(self, rng, cfg: ModelConfig):
        self.n, self.vocab_size, self.width = cfg.n, cfg.vocab_size, cfg.d_t
        self.token_embedding = _param(rng, (cfg.vocab_size, cfg.d_t), "embed", "text.token_embedding")
        self.pos = _param(rng, (cfg.n, cfg.d_t), "embed", "text.pos")
        self.blocks = [TransformerBlock(rng, cfg.d_t, cfg.heads, cfg.mlp_ratio, f"text.block{i + 1}")
                       for i in range(cfg.L)]
        self.ln_final = LayerNorm(cfg.d_t, "text.ln_final")
        self.proj = _param(rng, (cfg.d_t, cfg.d), "linear", "text.proj", fan_in=cfg.d_t)

    def embed(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.n:
            raise ValueError(f"expected tokens of shape (B, {self.n}), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError(f"token id out of vocabulary range [0, {self.vocab_size})")
        return T.embedding(self.token_embedding, tokens) + self.pos

    def embedding_parameters(self):
        return [self.token_embedding, self.pos]


def run_blocks(tower: _Tower, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
    for blk in tower.blocks[start:stop]:
        x = blk(x)
    return x


class DualEncoder:
    """Both towers plus helpers to run them end to end."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else T.make_rng(cfg.seed, "backbone")
        self.vision = VisionTower(rng, cfg)
        self.text = TextTower(rng, cfg)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for tower in (self.vision, self.text):
            for p in tower.embedding_parameters() + tower.block_parameters() + tower.ln_final.parameters():
                out.append((p.name, p))
            out.append((tower.proj.name, tower.proj))
        return out

    def frozen_parameters(self) -> list[Tensor]:
        """Everything except the two shared-space projections."""
        return [p for name, p in self.named_parameters() if not name.endswith(".proj")]

    def projection_parameters(self) -> list[Tensor]:
        return [self.vision.proj, self.text.proj]

    def vision_forward(self, patches, return_layers: bool = False):
        x = self.vision.embed(patches)
        layers = []
        for blk in self.vision.blocks:
            layers.append(x)
            x = blk(x)
        h = self.vision.head(x)
        return (h, layers) if return_layers else h

    def text_forward(self, tokens, return_layers: bool = False):
        x = self.text.embed(tokens)
        layers = []
        for blk in self.text.blocks:
            layers.append(x)
            x = blk(x)
        h = self.text.head(x)
        return (h, layers) if return_layers else h


def info_nce(h_v: Tensor, h_t: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over in-batch pairs on L2-normalized embeddings."""
    b = h_v.shape[0]
    if b < 2:
        raise T.UsageError("contrastive loss needs a batch of at least 2 pairs")
    zv = T.l2_normalize(h_v)
    zt = T.l2_normalize(h_t)
    logits = T.mul(T.matmul(zv, T.transpose(zt)), 1.0 / temperature)
    labels = np.arange(b)
    return T.mul(T.cross_entropy_logits(logits, labels) + T.cross_entropy_logits(T.transpose(logits), labels), 0.5)


def similarity_stats(backbone: DualEncoder, patches, tokens) -> tuple[float, float]:
    """Mean diagonal and off-diagonal cosine similarity for aligned pairs."""
    with T.no_grad():
        zv = T.l2_normalize(backbone.vision_forward(patches)).data
        zt = T.l2_normalize(backbone.text_forward(tokens)).data
    sim = zv @ zt.T
    b = sim.shape[0]
    diag = float(np.trace(sim) / b)
    off = float((sim.sum() - np.trace(sim)) / (b * b - b))
    return diag, off


def contrastive_pretrain(backbone: DualEncoder, patches: np.ndarray, tokens: np.ndarray, steps: int,
                         temperature: float = 0.1, batch_size: int = 32, learning_rate: float = 1e-3,
                         seed: int = 0) -> list[float]:
    """Train the whole backbone on aligned (patches, tokens) pairs; returns per-step losses."""
    if batch_size < 2 or len(patches) < 2:
        raise T.UsageError("contrastive pretraining needs batches of at least 2 pairs")
    params = [p for _, p in backbone.named_parameters()]
    for p in params:
        p.requires_grad = True
    opt = T.Adam(params, learning_rate)
    rng = T.make_rng(seed, "pretrain")
    n = len(patches)
    losses = []
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        loss = info_nce(backbone.vision_forward(patches[idx]), backbone.text_forward(tokens[idx]), temperature)
        T.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses
