"""Two-level attention: per-input word attention, then attention over inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import AnnotationMatrix
from .errors import DimensionError, InputError
from .numerics import Tensor


@dataclass
class WordAttentionParams:
    W_a: Tensor  # attn x n
    U_a: Tensor  # attn x 2n
    v_a: Tensor  # attn

    @classmethod
    def from_mapping(cls, params, prefix: str) -> "WordAttentionParams":
        return cls(*(nx.as_tensor(params[f"{prefix}.{f}"]) for f in ("W_a", "U_a", "v_a")))


@dataclass
class SystemAttentionParams:
    P: Tensor  # n x 2n, maps a per-input context to decoder-state space


@dataclass
class AttentionOutput:
    contexts: list[Tensor]
    alphas: list[Tensor]
    beta: Tensor
    context: Tensor


def precompute_keys(H: AnnotationMatrix, p: WordAttentionParams) -> Tensor:
    """U_a h_i for every position; independent of the decoder step."""
    if H.dim != p.U_a.shape[1]:
        raise DimensionError(f"word attention: annotations have dim {H.dim}, U_a expects {p.U_a.shape[1]}")
    return H.H @ p.U_a.T


def word_attention(s_tilde, H: AnnotationMatrix, p: WordAttentionParams,
                   keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Context c_jk and weights alpha for one input.

    e_i = v_a . tanh(W_a s_tilde + U_a h_i) over unmasked positions, alpha =
    softmax(e), c = sum_i alpha_i h_i.  ``s_tilde`` is [B, n].
    """
    s_tilde = nx.as_tensor(s_tilde)
    if s_tilde.shape[-1] != p.W_a.shape[1]:
        raise DimensionError(f"word attention: state dim {s_tilde.shape[-1]}, W_a expects {p.W_a.shape[1]}")
    if not np.asarray(H.mask).any(axis=-1).all():
        raise InputError("word attention: all positions masked")
    if keys is None:
        keys = precompute_keys(H, p)
    B, T = H.mask.shape
    query = nx.reshape(s_tilde @ p.W_a.T, (B, 1, -1))
    scores = nx.tanh(keys + query) @ p.v_a
    alpha = nx.softmax(scores, axis=-1, mask=H.mask)
    c = nx.reshape(nx.reshape(alpha, (B, 1, T)) @ H.H, (B, H.dim))
    return c, alpha


def system_attention(s_tilde, contexts: list, p: SystemAttentionParams) -> tuple[Tensor, Tensor]:
    """Fuse per-input contexts: beta_k = softmax_k(s_tilde . (P c_k)), c = sum_k beta_k c_k."""
    if len(contexts) == 0:
        raise InputError("system attention: no contexts")
    s_tilde = nx.as_tensor(s_tilde)
    B, n = s_tilde.shape
    if p.P.shape[0] != n:
        raise DimensionError(f"system attention: P maps to {p.P.shape[0]}, state has dim {n}")
    C = nx.stack(contexts, axis=1)
    K, d = C.shape[1], C.shape[2]
    scores = nx.reshape((C @ p.P.T) @ nx.reshape(s_tilde, (B, n, 1)), (B, K))
    beta = nx.softmax(scores, axis=-1)
    c = nx.reshape(nx.reshape(beta, (B, 1, K)) @ C, (B, d))
    return c, beta


def attend(s_tilde, inputs: list[AnnotationMatrix], word_params: list[WordAttentionParams],
           sys_params: SystemAttentionParams, keys: list[Tensor] | None = None) -> AttentionOutput:
    if keys is None:
        keys = [None] * len(inputs)
    contexts, alphas = [], []
    for H, wp, kk in zip(inputs, word_params, keys):
        c, a = word_attention(s_tilde, H, wp, kk)
        contexts.append(c)
        alphas.append(a)
    c, beta = system_attention(s_tilde, contexts, sys_params)
    return AttentionOutput(contexts, alphas, beta, c)
