"""Synthetic backends for oracle tests.

``SyntheticLinearBackend`` is an affine stack (``h -> A_k h + c_k``) whose
``n -> N`` map is known in closed form; with the default identity unembedding
the lens logits are the state entries themselves.  ``ToyMLPBackend`` is a
small residual MLP stack with layer norms, differentiated by autograd.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
import torch

from .base import Backend, ModelInfo


class ByteTokenizer:
    """UTF-8 bytes as tokens, plus one end-of-sequence id (256)."""

    vocab_size = 257
    eos_token_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, token_ids: Sequence[int]) -> str:
        return bytes(t for t in token_ids if t < 256).decode("utf-8", errors="replace")


def _context(E: np.ndarray, token_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Final-token embedding and the mean embedding of the preceding tokens."""
    last = E[token_ids[-1]]
    prev = E[list(token_ids[:-1])].mean(axis=0) if len(token_ids) > 1 else np.zeros_like(last)
    return last, prev


class SyntheticLinearBackend(Backend):
    def __init__(self, blocks: Sequence[tuple[np.ndarray, np.ndarray]], embedding: np.ndarray,
                 unembedding: np.ndarray | None = None, unembedding_bias: np.ndarray | None = None,
                 context_mix: float = 0.5, tokenizer=None, name: str = "synthetic-linear"):
        self.tokenizer = tokenizer or ByteTokenizer()
        self.blocks = [(np.asarray(A, float), np.asarray(c, float)) for A, c in blocks]
        self.embedding = np.asarray(embedding, float)
        V, d = self.embedding.shape
        if unembedding is None:
            if V != d:
                raise ValueError("identity unembedding requires vocab_size == hidden_size")
            unembedding = np.eye(d)
        self.unembedding = np.asarray(unembedding, float)
        self.unembedding_bias = np.zeros(V) if unembedding_bias is None else np.asarray(unembedding_bias, float)
        self.context_mix = context_mix
        self.eos_token_id = getattr(self.tokenizer, "eos_token_id", None)
        self.info = ModelInfo(name, len(self.blocks), d, V)

    @classmethod
    def random(cls, num_layers: int = 3, seed: int = 0, tokenizer=None, **kwargs):
        tokenizer = tokenizer or ByteTokenizer()
        d = tokenizer.vocab_size
        rng = np.random.default_rng(seed)
        blocks = [(np.eye(d) + 0.3 * rng.standard_normal((d, d)) / np.sqrt(d), 0.1 * rng.standard_normal(d))
                  for _ in range(num_layers)]
        return cls(blocks, rng.standard_normal((d, d)), tokenizer=tokenizer, **kwargs)

    def encode(self, text):
        return self.tokenizer.encode(text)

    def decode(self, token_ids):
        return self.tokenizer.decode(token_ids)

    def fingerprint(self):
        h = hashlib.sha256(self.info.name.encode())
        for A, c in self.blocks:
            h.update(A.tobytes())
            h.update(c.tobytes())
        h.update(self.embedding.tobytes())
        h.update(self.unembedding.tobytes())
        return h.hexdigest()[:16]

    def affine_map(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Closed-form ``(A, c)`` with ``h_N = A h_n + c``."""
        d = self.info.hidden_size
        A_tot, c_tot = np.eye(d), np.zeros(d)
        for A, c in self.blocks[n:]:
            A_tot, c_tot = A @ A_tot, A @ c_tot + c
        return A_tot, c_tot

    def layer_states(self, token_ids, upto=None):
        last, prev = _context(self.embedding, token_ids)
        h = last + self.context_mix * prev
        states = [h]
        for A, c in self.blocks[: self.info.num_layers if upto is None else upto]:
            h = A @ h + c
            states.append(h)
        return np.stack(states)

    def run_from(self, token_ids, n, h_n):
        h = np.asarray(h_n, float)
        for A, c in self.blocks[n:]:
            h = A @ h + c
        return h

    def readout(self, states):
        return np.asarray(states) @ self.unembedding + self.unembedding_bias


class ToyMLPBackend(Backend):
    """Residual MLP blocks with pre-layer-norm, a final layer norm and a
    random unembedding; previous tokens enter every block through their mean
    embedding, which plays the role of the held-fixed context positions."""

    def __init__(self, num_layers: int = 3, hidden_size: int = 32, seed: int = 0, tokenizer=None,
                 name: str = "toy-mlp"):
        self.tokenizer = tokenizer or ByteTokenizer()
        V, d = self.tokenizer.vocab_size, hidden_size
        g = torch.Generator().manual_seed(seed)
        rn = lambda *shape, s=1.0: torch.randn(*shape, generator=g, dtype=torch.float64) * s
        self.embedding = rn(V, d)
        self.blocks = [
            dict(w1=rn(d, 2 * d, s=d ** -0.5), b1=rn(2 * d, s=0.1), w2=rn(2 * d, d, s=(2 * d) ** -0.5),
                 b2=rn(d, s=0.1), ctx=rn(d, d, s=0.3 * d ** -0.5))
            for _ in range(num_layers)
        ]
        self.ln_weight = 1.0 + rn(d, s=0.1)
        self.ln_bias = rn(d, s=0.1)
        self.unembedding = rn(d, V, s=d ** -0.5)
        self.eos_token_id = getattr(self.tokenizer, "eos_token_id", None)
        self.seed = seed
        self.info = ModelInfo(name, num_layers, d, V)

    def encode(self, text):
        return self.tokenizer.encode(text)

    def decode(self, token_ids):
        return self.tokenizer.decode(token_ids)

    def fingerprint(self):
        return hashlib.sha256(f"{self.info}/{self.seed}".encode()).hexdigest()[:16]

    @staticmethod
    def _ln(h, weight=None, bias=None):
        h = (h - h.mean(-1, keepdim=True)) / torch.sqrt(h.var(-1, unbiased=False, keepdim=True) + 1e-5)
        return h if weight is None else h * weight + bias

    def _block(self, p, h, ctx):
        return h + torch.tanh(self._ln(h) @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"] + ctx @ p["ctx"]

    def _ctx(self, token_ids):
        if len(token_ids) > 1:
            return self.embedding[list(token_ids[:-1])].mean(0)
        return torch.zeros(self.info.hidden_size, dtype=torch.float64)

    def _forward(self, token_ids, n, h):
        ctx = self._ctx(token_ids)
        for p in self.blocks[n:]:
            h = self._block(p, h, ctx)
        return h

    def layer_states(self, token_ids, upto=None):
        ctx = self._ctx(token_ids)
        h = self.embedding[token_ids[-1]] + 0.5 * ctx
        states = [h]
        for p in self.blocks[: self.info.num_layers if upto is None else upto]:
            h = self._block(p, h, ctx)
            states.append(h)
        return torch.stack(states).numpy()

    def run_from(self, token_ids, n, h_n):
        return self._forward(token_ids, n, torch.as_tensor(h_n, dtype=torch.float64)).numpy()

    def readout(self, states):
        h = torch.as_tensor(np.asarray(states), dtype=torch.float64)
        return (self._ln(h, self.ln_weight, self.ln_bias) @ self.unembedding).numpy()

    def _jacobian(self, token_ids, n, h_n):
        h = torch.as_tensor(h_n, dtype=torch.float64)
        return torch.autograd.functional.jacobian(lambda v: self._forward(token_ids, n, v), h).numpy()
