"""On-disk cache of final-token layer states.

One ``.npy`` array of float32 states shaped ``(num_facts, N+1, d)`` per
(model, language, relation, template), next to a JSON sidecar.  An entry is
reused only when the model fingerprint, template index and prompt hash all
match.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from ..io import atomic_save_npy, atomic_write_json, text_hash
from ..klar import FactTriple, build_prompt
from .base import Backend

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "XLINGUAL_CACHE_DIR"


def default_cache_dir() -> Path | None:
    env = os.environ.get(CACHE_ENV_VAR)
    return Path(env) if env else None


class ActivationCache:
    def __init__(self, root: str | Path | None = None):
        root = root if root is not None else default_cache_dir()
        self.root = Path(root) if root is not None else None
        self._memory: dict[tuple, np.ndarray] = {}

    def _paths(self, backend: Backend, language: str, relation: str, template_index: int):
        d = self.root / backend.fingerprint() / language
        stem = f"{relation}.t{template_index}"
        return d / f"{stem}.npy", d / f"{stem}.json"

    def states(self, backend: Backend, facts: Sequence[FactTriple], template_index: int) -> np.ndarray:
        """States for ``facts`` (all from one language and relation), in order."""
        if not facts:
            return np.zeros((0, backend.info.num_layers + 1, backend.info.hidden_size), np.float32)
        language, relation = facts[0].language, facts[0].relation.relation_name
        if any(f.language != language or f.relation.relation_name != relation for f in facts):
            raise ValueError("cache entries hold a single (language, relation)")
        prompts = [build_prompt(f, template_index) for f in facts]
        prompt_hash = text_hash(*prompts)
        mem_key = (backend.fingerprint(), language, relation, template_index, prompt_hash)
        if mem_key in self._memory:
            return self._memory[mem_key]

        arr = self._load(backend, language, relation, template_index, prompt_hash) if self.root else None
        if arr is None:
            arr = np.stack([backend.capture_trace(p).states for p in prompts]).astype(np.float32)
            if self.root:
                npy, sidecar = self._paths(backend, language, relation, template_index)
                atomic_save_npy(npy, arr)
                atomic_write_json(sidecar, {
                    "model": backend.info.name,
                    "fingerprint": backend.fingerprint(),
                    "layer_count": backend.info.num_layers,
                    "hidden_size": backend.info.hidden_size,
                    "template_index": template_index,
                    "fact_indices": [f.index for f in facts],
                    "prompt_hash": prompt_hash,
                })
        self._memory[mem_key] = arr
        return arr

    def _load(self, backend, language, relation, template_index, prompt_hash):
        npy, sidecar = self._paths(backend, language, relation, template_index)
        if not (npy.exists() and sidecar.exists()):
            return None
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if (meta.get("fingerprint") != backend.fingerprint() or meta.get("prompt_hash") != prompt_hash
                or meta.get("template_index") != template_index):
            logger.info("stale activation cache entry %s; recomputing", npy)
            return None
        return np.load(npy, allow_pickle=False)
