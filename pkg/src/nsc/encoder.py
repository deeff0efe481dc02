"""Bidirectional GRU encoder.

Gate convention: z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
candidate = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, InputError
from .numerics import Tensor

GRU_CONVENTION = "update-interpolates"
GRU_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def from_mapping(cls, params, prefix: str) -> "GruParams":
        return cls(**{f: nx.as_tensor(params[f"{prefix}.{f}"]) for f in GRU_FIELDS})

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    def validate(self) -> None:
        n, d = self.hidden, self.input_dim
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (n, d):
                raise DimensionError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(n, d)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (n, n):
                raise DimensionError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(n, n)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(n,)}")


class GruCell:
    """A GRU with its weight concatenations built once per forward pass.

    ``project`` maps inputs (any leading shape) to the stacked [z | r | h]
    input terms including biases, so a whole sequence can be projected with a
    single matmul; ``step`` then runs one recurrence from a projected input.
    """

    def __init__(self, p: GruParams):
        p.validate()
        self.n = p.hidden
        self.input_dim = p.input_dim
        self.W_T = nx.concat([p.W_z, p.W_r, p.W_h], axis=0).T
        self.b = nx.concat([p.b_z, p.b_r, p.b_h], axis=0)
        self.Uzr_T = nx.concat([p.U_z, p.U_r], axis=0).T
        self.Uh_T = p.U_h.T

    def project(self, x) -> Tensor:
        x = nx.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"GRU input has dim {x.shape[-1]}, expected {self.input_dim}")
        return x @ self.W_T + self.b

    def step(self, xp: Tensor, h: Tensor) -> Tensor:
        n = self.n
        if h.shape[-1] != n:
            raise DimensionError(f"GRU hidden state has dim {h.shape[-1]}, expected {n}")
        hzr = h @ self.Uzr_T
        z = nx.sigmoid(xp[..., :n] + hzr[..., :n])
        r = nx.sigmoid(xp[..., n:2 * n] + hzr[..., n:])
        cand = nx.tanh(xp[..., 2 * n:] + (r * h) @ self.Uh_T)
        return (1.0 - z) * h + z * cand


def gru_step(x_t, h_prev, p: GruParams) -> Tensor:
    cell = GruCell(p)
    return cell.step(cell.project(x_t), nx.as_tensor(h_prev))


@dataclass
class AnnotationMatrix:
    """Annotations ``H`` of shape [B, T, 2n] plus a [B, T] validity mask."""
    H: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.H.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    @property
    def dim(self) -> int:
        return self.H.shape[2]


def run_gru(cell: GruCell, xp: Tensor, mask: np.ndarray, reverse: bool = False) -> list[Tensor]:
    """Run over projected inputs xp [B, T, 3n] from a zero state.

    Returns the state at every position (in position order).  At padded
    positions the previous state is carried unchanged, so right-padding never
    leaks into the backward direction.
    """
    B, T = mask.shape
    h = Tensor(np.zeros((B, cell.n), dtype=xp.dtype))
    states: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        new = cell.step(xp[:, t], h)
        m = mask[:, t]
        if not m.all():
            keep = m[:, None].astype(xp.dtype)
            new = new * keep + h * (1.0 - keep)
        h = new
        states[t] = h
    return states


def encode(tokens, emb, fwd: GruParams, bwd: GruParams, mask=None) -> AnnotationMatrix:
    """Encode one id sequence, or a right-padded [B, T] id batch with its mask."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.size == 0 or ids.shape[1] == 0:
        raise InputError("encode: empty input sequence")
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ids.shape:
        raise DimensionError(f"encode: mask {mask.shape} vs ids {ids.shape}")
    if not mask.any(axis=1).all():
        raise InputError("encode: a sequence in the batch has no tokens")
    x = nx.embedding(emb, ids)
    fcell, bcell = GruCell(fwd), GruCell(bwd)
    hf = run_gru(fcell, fcell.project(x), mask)
    hb = run_gru(bcell, bcell.project(x), mask, reverse=True)
    H = nx.concat([nx.stack(hf, axis=1), nx.stack(hb, axis=1)], axis=-1)
    return AnnotationMatrix(H, mask)
