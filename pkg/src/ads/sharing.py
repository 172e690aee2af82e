"""Bottleneck adapters and text-to-vision adapter-state sharing.

Adapters sit in parallel to transformer blocks ``K..L``:
``x_next = block(x) + alpha * adapter(x)``.  The pooled adapter outputs of the
source tower are stacked into a :class:`StateQueue`; every adapted layer of the
target tower scores the whole queue against its own pooled adapter state with a
single bilinear matrix ``W`` and adds ``gamma * P_f @ (Att-weighted sum)`` to
its residual stream.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import _param
from .tensor import Tensor, UsageError


class Adapter:
    """``A(h) = W_up relu(W_down h + b_down) + b_up`` applied per position.

    ``W_up`` and ``b_up`` start at zero so a fresh adapter outputs exactly 0.
    """

    def __init__(self, rng, width: int, bottleneck: int, name: str):
        self.width = width
        self.down = _param(rng, (width, bottleneck), "linear", f"{name}.down.weight", fan_in=width)
        self.down_bias = _param(rng, (bottleneck,), "zeros", f"{name}.down.bias")
        self.up = _param(rng, (bottleneck, width), "zeros", f"{name}.up.weight")
        self.up_bias = _param(rng, (width,), "zeros", f"{name}.up.bias")

    def parameters(self) -> list[Tensor]:
        return [self.down, self.down_bias, self.up, self.up_bias]

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.width:
            raise T.ShapeError(f"adapter width {self.width} does not match input {h.shape}")
        return T.matmul(T.relu(T.matmul(h, self.down) + self.down_bias), self.up) + self.up_bias


def adapter_forward(adapter: Adapter, h: Tensor) -> Tensor:
    return adapter(h)


class StateQueue:
    """Pooled adapter states of the source tower, one row per adapted layer.

    Lives for a single forward pass.  Reading before every adapted layer has
    pushed its state is an error.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._rows: list[Tensor] = []
        self._matrix: Tensor | None = None

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def full(self) -> bool:
        return len(self._rows) == self.capacity

    def push(self, state: Tensor) -> None:
        if self.full:
            raise UsageError(f"state queue already holds {self.capacity} rows")
        self._rows.append(state)
        self._matrix = None

    def matrix(self) -> Tensor:
        """Queue as a ``(batch, rows, width)`` tensor."""
        if not self._rows:
            raise UsageError("state queue is empty: the source tower has not run")
        if not self.full:
            raise UsageError(f"state queue holds {len(self._rows)}/{self.capacity} rows; source tower incomplete")
        if self._matrix is None:
            b, w = self._rows[0].shape
            self._matrix = T.concat([T.reshape(r, (b, 1, w)) for r in self._rows], axis=1)
        return self._matrix

    def clear(self) -> None:
        self._rows.clear()
        self._matrix = None


def _queue_tensor(queue) -> Tensor:
    if isinstance(queue, StateQueue):
        return queue.matrix()
    q = queue if isinstance(queue, Tensor) else Tensor(queue)
    if q.ndim == 2:
        q = T.reshape(q, (1,) + q.shape)
    if q.shape[1] == 0:
        raise UsageError("state queue is empty: the source tower has not run")
    return q


def state_attention(queue, W: Tensor, s: Tensor) -> Tensor:
    """``softmax(Q W s)`` over queue rows; returns ``(batch, rows)``.

    ``queue`` is a StateQueue or an array of shape ``(rows, d_src)`` /
    ``(batch, rows, d_src)``; ``s`` is ``(d_dst,)`` or ``(batch, d_dst)``.
    """
    q = _queue_tensor(queue)
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.ndim == 1:
        s = T.reshape(s, (1,) + s.shape)
    b = s.shape[0]
    scores = T.matmul(T.matmul(q, W), T.reshape(s, (b, s.shape[1], 1)))
    return T.softmax(T.reshape(scores, (b, q.shape[1])), axis=-1)


def fuse_states(queue, att: Tensor) -> Tensor:
    """``f = sum_i Att_i * Q_i``; returns ``(batch, d_src)``."""
    q = _queue_tensor(queue)
    att = att if isinstance(att, Tensor) else Tensor(att)
    if att.ndim == 1:
        att = T.reshape(att, (1,) + att.shape)
    if att.shape[-1] != q.shape[1]:
        raise T.ShapeError(f"attention length {att.shape[-1]} does not match {q.shape[1]} queue rows")
    b = att.shape[0]
    f = T.matmul(T.reshape(att, (b, 1, att.shape[1])), q)
    return T.reshape(f, (b, q.shape[2]))


class SharingParams:
    """Bilinear scorer ``W`` (d_src x d_dst) and fusion projection ``P_f`` (d_dst x d_src)."""

    def __init__(self, rng, d_src: int, d_dst: int):
        self.W = _param(rng, (d_src, d_dst), "linear", "sharing.W", fan_in=d_dst)
        self.P_f = _param(rng, (d_dst, d_src), "linear", "sharing.P_f", fan_in=d_src)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.P_f]

    def guidance(self, queue: StateQueue, s: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(P_f f, Att)`` for a pooled target-tower adapter state ``s``."""
        att = state_attention(queue, self.W, s)
        f = fuse_states(queue, att)
        return T.matmul(f, T.transpose(self.P_f)), att


def broadcast_guidance(g: Tensor, seq_len: int, mode: str, position: int = 0) -> Tensor:
    """Shape a ``(batch, width)`` vector for addition to a ``(batch, seq_len, width)`` stream.

    ``ALL_POSITIONS`` yields ``(batch, 1, width)`` which reaches every position;
    ``CLASS_TOKEN_ONLY`` places it at ``position`` with zeros elsewhere.
    """
    b, w = g.shape
    g3 = T.reshape(g, (b, 1, w))
    if mode == "ALL_POSITIONS":
        return g3  # broadcasts over positions on addition
    pos = position % seq_len
    zeros_before = Tensor(np.zeros((b, pos, w)))
    zeros_after = Tensor(np.zeros((b, seq_len - pos - 1, w)))
    return T.concat([zeros_before, g3, zeros_after], axis=1)
