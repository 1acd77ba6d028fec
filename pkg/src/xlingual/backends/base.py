"""Backend contract over a decoder-only transformer.

A backend exposes the final-token residual stream at every layer
(``states[0]`` is the embedding output fed to block 1, ``states[N]`` the output
of the last block before the final normalization), the logit-lens readout,
greedy decoding, and the Jacobian of the layer-n -> layer-N map at the final
position.
"""
from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-3


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelInfo:
    name: str
    num_layers: int
    hidden_size: int
    vocab_size: int
    language_set: frozenset[str] = frozenset()
    max_context: int | None = None

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_size < 1 or self.vocab_size < 2:
            raise ValueError(f"invalid model dimensions: {self}")


@dataclass(frozen=True)
class LayerTrace:
    prompt: str
    states: np.ndarray  # (N+1, d)
    lens_logits: np.ndarray | None = field(default=None, repr=False)  # (N+1, V)

    def __post_init__(self):
        if self.states.ndim != 2:
            raise ValueError("states must be a (num_layers + 1, hidden_size) array")
        if not np.all(np.isfinite(self.states)):
            raise ValueError(f"non-finite latent state in trace for {self.prompt!r}")

    @property
    def num_layers(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_ids: tuple[int, ...]
    stop_reason: str  # "max_tokens" | "newline" | "end_of_sequence"


class Backend(ABC):
    """Abstract model backend; subclasses provide the five primitives below."""

    info: ModelInfo

    @abstractmethod
    def encode(self, text: str) -> list[int]: ...

    @abstractmethod
    def decode(self, token_ids: Sequence[int]) -> str: ...

    @abstractmethod
    def layer_states(self, token_ids: Sequence[int], upto: int | None = None) -> np.ndarray:
        """Final-token states ``h_0 .. h_upto`` (all layers when ``upto`` is None)."""

    @abstractmethod
    def run_from(self, token_ids: Sequence[int], n: int, h_n: np.ndarray) -> np.ndarray:
        """Recompute ``h_N`` after replacing the final-position state at layer ``n``."""

    @abstractmethod
    def readout(self, states: np.ndarray) -> np.ndarray:
        """Logit lens: final normalization then unembedding. Accepts (d,) or (k, d)."""

    eos_token_id: int | None = None

    def answer_ids(self, text: str) -> list[int]:
        """Token ids of ``text`` tokenized as a continuation."""
        return self.encode(text)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.info.name.encode()).hexdigest()[:16]

    # derived operations

    def _ids(self, prompt: str) -> list[int]:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        ids = self.encode(prompt)
        self._check_context(len(ids))
        return ids

    def _check_context(self, length: int):
        limit = self.info.max_context
        if limit is not None and length > limit:
            raise ContextLengthError(f"sequence of {length} tokens exceeds context length {limit}")

    def capture_trace(self, prompt: str, with_logits: bool = False) -> LayerTrace:
        states = self.layer_states(self._ids(prompt))
        logits = self.readout(states) if with_logits else None
        return LayerTrace(prompt, states, logits)

    def lens_project(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state)
        if state.shape[-1] != self.info.hidden_size:
            raise ValueError(f"state has dimension {state.shape[-1]}, expected {self.info.hidden_size}")
        return self.readout(state)

    def is_newline(self, token_id: int) -> bool:
        return "\n" in self.decode([token_id])

    def decode_loop(self, prompt: str, max_tokens: int,
                    next_token: Callable[[list[int]], int]) -> GenerationResult:
        """Greedy decoding driven by ``next_token(ids) -> token id``.

        Newline and end-of-sequence tokens terminate decoding and are not part
        of the returned text.
        """
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        ids = self._ids(prompt)
        out: list[int] = []
        reason = "max_tokens"
        for _ in range(max_tokens):
            self._check_context(len(ids) + 1)
            tok = int(next_token(ids))
            if self.eos_token_id is not None and tok == self.eos_token_id:
                reason = "end_of_sequence"
                break
            if self.is_newline(tok):
                reason = "newline"
                break
            out.append(tok)
            ids = ids + [tok]
        return GenerationResult(self.decode(out), tuple(out), reason)

    def next_token_logits(self, token_ids: Sequence[int]) -> np.ndarray:
        return self.readout(self.layer_states(token_ids)[-1])

    def greedy_generate(self, prompt: str, max_tokens: int = 16) -> GenerationResult:
        return self.decode_loop(prompt, max_tokens, lambda ids: int(np.argmax(self.next_token_logits(ids))))

    def jacobian_at(self, prompt: str, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(dh_N/dh_n, h_n, h_N)`` at the final prompt position."""
        ids = self._ids(prompt)
        N = self.info.num_layers
        if not 0 <= n <= N:
            raise ValueError(f"layer {n} outside [0, {N}]")
        states = self.layer_states(ids)
        if n == N:
            return np.eye(self.info.hidden_size), states[N], states[N]
        J = self._jacobian(ids, n, states[n])
        return J, states[n], states[N]

    def _jacobian(self, token_ids: list[int], n: int, h_n: np.ndarray) -> np.ndarray:
        return finite_difference_jacobian(lambda v: self.run_from(token_ids, n, v), h_n)


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x`` (per-coordinate ``step``)."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fn(x + e), dtype=np.float64) - np.asarray(fn(x - e), dtype=np.float64))
                    / (2 * step))
    return np.stack(cols, axis=1)
