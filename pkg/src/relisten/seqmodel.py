"""Causal self-attention encoder over session embeddings, plus the fusion gate.

Each block is exactly ``FFL(SAL(X))`` with no layer norm and no dropout;
``residual=True`` adds skip connections around both sub-layers.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from relisten.embed import DTYPE


def init_transformer(d: int, L: int, B: int, H: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    if d % H:
        raise ValueError(f"H={H} must divide d={d}")

    def normal(std, *shape):
        return torch.from_numpy(rng.normal(0.0, std, size=shape)).to(DTYPE)

    params = {"positional": normal(0.1, L, d)}
    s = 1.0 / math.sqrt(d)
    for b in range(B):
        params[f"block{b}.wq"] = normal(s, H, d, d // H)
        params[f"block{b}.wk"] = normal(s, H, d, d // H)
        params[f"block{b}.wv"] = normal(s, H, d, d // H)
        params[f"block{b}.wo"] = normal(s, d, d)
        params[f"block{b}.w1"] = normal(s, d, d)
        params[f"block{b}.b1"] = torch.zeros(d, dtype=DTYPE)
        params[f"block{b}.w2"] = normal(s, d, d)
        params[f"block{b}.b2"] = torch.zeros(d, dtype=DTYPE)
    return params


def n_blocks(params: dict[str, torch.Tensor]) -> int:
    return sum(1 for k in params if k.endswith(".wq"))


def causal_mask(l: int) -> torch.Tensor:
    return torch.ones(l, l, dtype=torch.bool).tril()


def attention(x: torch.Tensor, wq, wk, wv, causal: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head scaled dot-product attention (scores divided by sqrt(d)).

    ``x`` is (..., l, d); head weights are (H, d, d/H). Returns the concatenated
    head outputs (..., l, d) and the attention matrices (..., H, l, l).
    """
    d = x.shape[-1]
    xh = x.unsqueeze(-3)  # (..., 1, l, d)
    q, k, v = xh @ wq, xh @ wk, xh @ wv  # (..., H, l, d/H)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    if causal:
        scores = scores.masked_fill(~causal_mask(x.shape[-2]), float("-inf"))
    att = torch.softmax(scores, dim=-1)
    heads = att @ v
    return torch.cat(heads.unbind(-3), dim=-1), att


def self_attention_block(x: torch.Tensor, params: dict, b: int, residual: bool = False) -> torch.Tensor:
    p = lambda name: params[f"block{b}.{name}"]  # noqa: E731
    heads, _ = attention(x, p("wq"), p("wk"), p("wv"))
    sal = heads @ p("wo")
    if residual:
        sal = sal + x
    ffl = torch.relu(sal @ p("w1") + p("b1")) @ p("w2") + p("b2")
    return ffl + sal if residual else ffl


def encode_sequence(session_embeddings: torch.Tensor, params: dict, residual: bool = False) -> torch.Tensor:
    """(..., l, d) session embeddings -> (..., l, d) encoder output, causally masked."""
    l = session_embeddings.shape[-2]
    L = params["positional"].shape[0]
    if l == 0:
        raise ValueError("cannot encode an empty sequence")
    if l > L:
        raise ValueError(f"sequence length {l} exceeds positional table size {L}")
    x = session_embeddings + params["positional"][:l]
    for b in range(n_blocks(params)):
        x = self_attention_block(x, params, b, residual)
    return x


def short_term_embedding(encoded: torch.Tensor) -> torch.Tensor:
    if encoded.shape[-2] == 0:
        raise ValueError("empty encoder output")
    return encoded[..., -1, :]


def init_gate(d: int) -> dict[str, torch.Tensor]:
    return {"gate.w": torch.zeros(2 * d, dtype=DTYPE), "gate.b": torch.zeros(1, dtype=DTYPE)}


def fuse(short: torch.Tensor, long: torch.Tensor, gate_w: torch.Tensor, gate_b: torch.Tensor):
    """beta = sigmoid(gate([short; long])); returns (beta*short + (1-beta)*long, beta)."""
    beta = torch.sigmoid(torch.cat([short, long], dim=-1) @ gate_w + gate_b[0])
    return beta[..., None] * short + (1.0 - beta[..., None]) * long, beta
