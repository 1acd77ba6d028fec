"""Linear shortcut from layer ``n`` straight to the final latent state.

The map ``h_n -> h_N`` is approximated by ``f(h) = beta * W_r h + b_r`` where
``W_r`` is the mean Jacobian ``dh_N/dh_n`` over correctly answered training
prompts and ``b_r`` the mean of ``h_N - J h_n`` over the same prompts.  One
shortcut is fitted per language and shared by all relations.  At inference
the model is run only up to layer ``n``; the shortcut output goes through the
usual final norm and unembedding.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backends.base import Backend, GenerationResult
from .consistency import ConsistencyMatrix, consistency_matrix, relation_consistency
from .io import atomic_save_npz, atomic_write_json
from .klar import DEFAULT_TEMPLATE_INDEX, Dataset, build_prompt
from .probing import (DEFAULT_MAX_TOKENS, AccuracyReport, ProbeRecord, accuracy, probe_fact,
                      run_probe)

logger = logging.getLogger(__name__)

BETA_GRID = tuple(np.round(np.arange(0, 5.0 + 1e-9, 0.25), 2))
M_OPTIONS = (10, 25, 40, 50)
LAYER_RANGES = {"llama2": range(20, 33), "bloom": range(12, 25)}

# selected hyperparameters per language (extraction layer, sample count shared)
BLOOM_CONFIG = {"n": 21, "m": 25, "beta": {"ar": 1.25, "ca": 1.00, "en": 1.25, "es": 1.00,
                                           "fr": 0.75, "vi": 1.25, "zh": 1.50}}
LLAMA2_CONFIG = {"n": 30, "m": 25, "beta": {"ca": 4.75, "en": 1.50, "es": 3.00, "fr": 4.25, "hu": 2.50,
                                            "ja": 2.25, "ko": 4.50, "nl": 3.50, "ru": 4.25, "uk": 2.25,
                                            "vi": 1.00, "zh": 1.50}}


class InsufficientSamplesError(ValueError):
    pass


class ShortcutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ShortcutConfig:
    layer_n: int
    beta: float
    samples_per_relation_m: int
    language: str

    def __post_init__(self):
        if self.layer_n < 0:
            raise ValueError("layer_n must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.samples_per_relation_m < 1:
            raise ValueError("samples_per_relation_m must be >= 1")


def reference_config(model: str, language: str) -> ShortcutConfig:
    table = {"bloom": BLOOM_CONFIG, "llama2": LLAMA2_CONFIG}[model]
    return ShortcutConfig(table["n"], table["beta"][language], table["m"], language)


@dataclass(frozen=True)
class LinearShortcut:
    W: np.ndarray
    b: np.ndarray
    config: ShortcutConfig
    provenance: tuple[tuple[str, int], ...] = ()
    jacobian_mean: np.ndarray | None = field(default=None, repr=False)
    fingerprint: str = ""

    def __post_init__(self):
        d = self.b.shape[0]
        if self.W.shape != (d, d):
            raise ValueError(f"W has shape {self.W.shape}, expected ({d}, {d})")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("shortcut has non-finite entries")

    def __call__(self, h_n: np.ndarray) -> np.ndarray:
        return np.asarray(h_n) @ self.W.T + self.b

    def with_beta(self, beta: float) -> "LinearShortcut":
        if self.jacobian_mean is None:
            raise ValueError("rescaling needs the unscaled mean Jacobian")
        return replace(self, W=beta * self.jacobian_mean, config=replace(self.config, beta=float(beta)))

    def save(self, path: str | Path):
        """Write ``<path>.npz`` (float32 arrays) and ``<path>.json`` (metadata)."""
        path = Path(path)
        arrays = {"W": self.W.astype(np.float32), "b": self.b.astype(np.float32)}
        if self.jacobian_mean is not None:
            arrays["W_r"] = self.jacobian_mean.astype(np.float32)
        atomic_save_npz(path.with_suffix(".npz"), **arrays)
        atomic_write_json(path.with_suffix(".json"), {
            "language": self.config.language, "n": self.config.layer_n, "beta": self.config.beta,
            "m": self.config.samples_per_relation_m, "model_fingerprint": self.fingerprint,
            "training_indices": [list(k) for k in self.provenance],
        })

    @classmethod
    def load(cls, path: str | Path, backend: Backend | None = None) -> "LinearShortcut":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if backend is not None and meta["model_fingerprint"] != backend.fingerprint():
            raise ShortcutMismatchError(
                f"shortcut {path} was fitted on model {meta['model_fingerprint']}, "
                f"backend is {backend.fingerprint()}")
        with np.load(path.with_suffix(".npz")) as z:
            W, b = z["W"].astype(np.float64), z["b"].astype(np.float64)
            W_r = z["W_r"].astype(np.float64) if "W_r" in z else None
        cfg = ShortcutConfig(meta["n"], meta["beta"], meta["m"], meta["language"])
        return cls(W, b, cfg, tuple((r, i) for r, i in meta["training_indices"]), W_r,
                   meta["model_fingerprint"])


def select_training_records(records: Iterable[ProbeRecord], m: int, seed: int = 0) -> list[ProbeRecord]:
    """``m`` correct records per relation, drawn with a seeded permutation.

    For a fixed seed the selection for a smaller ``m`` is a prefix of the one
    for a larger ``m``.
    """
    by_rel: dict[str, list[ProbeRecord]] = {}
    for r in records:
        if r.correct:
            by_rel.setdefault(r.relation, []).append(r)
    chosen = []
    for rel in sorted(by_rel):
        pool = sorted(by_rel[rel], key=lambda r: r.fact.index)
        if len(pool) < m:
            logger.warning("relation %s: only %d correct samples (< m=%d); skipped", rel, len(pool), m)
            continue
        order = np.random.default_rng([seed, _stable_int(rel)]).permutation(len(pool))
        chosen.extend(pool[i] for i in order[:m])
    if not chosen:
        raise InsufficientSamplesError(f"no relation has at least m={m} correctly predicted samples")
    return chosen


def _stable_int(s: str) -> int:
    return int.from_bytes(s.encode("utf-8")[:8].ljust(8, b"\0"), "little")


def mean_jacobian_and_bias(samples: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]]
                           ) -> tuple[np.ndarray, np.ndarray]:
    """``(mean J, mean(h_N - J h_n))`` over ``(J, h_n, h_N)`` samples."""
    J_sum = b_sum = None
    count = 0
    for J, h_n, h_N in samples:
        J = np.asarray(J, float)
        b = np.asarray(h_N, float) - J @ np.asarray(h_n, float)
        J_sum = J if J_sum is None else J_sum + J
        b_sum = b if b_sum is None else b_sum + b
        count += 1
    if not count:
        raise InsufficientSamplesError("no training samples")
    return J_sum / count, b_sum / count


def fit_shortcut(backend: Backend, ds: Dataset, language: str, config: ShortcutConfig,
                 records: Sequence[ProbeRecord] | None = None,
                 template_index: int = DEFAULT_TEMPLATE_INDEX, seed: int = 0,
                 max_tokens: int = DEFAULT_MAX_TOKENS,
                 jacobian_fn: Callable[[str, int], tuple] | None = None) -> LinearShortcut:
    """Fit ``f(h_n) = beta W_r h_n + b_r`` on correctly answered prompts.

    ``records`` are probe records of ``language`` under the same backend and
    template; they are computed when omitted.
    """
    if config.language != language:
        raise ValueError(f"config is for {config.language!r}, fitting {language!r}")
    if config.layer_n > backend.info.num_layers:
        raise ValueError(f"layer {config.layer_n} beyond model depth {backend.info.num_layers}")
    if records is None:
        records = run_probe(ds, backend, language, max_tokens, template_index)
    records = [r for r in records if r.language == language]
    train = select_training_records(records, config.samples_per_relation_m, seed)
    jac = jacobian_fn or backend.jacobian_at
    W_r, b_r = mean_jacobian_and_bias(jac(build_prompt(r.fact, template_index), config.layer_n)
                                      for r in train)
    return LinearShortcut(config.beta * W_r, b_r, config, tuple(r.fact.key for r in train), W_r,
                          backend.fingerprint())


def _check_dims(backend: Backend, shortcut: LinearShortcut):
    d = backend.info.hidden_size
    if shortcut.b.shape != (d,):
        raise ValueError(f"shortcut dimension {shortcut.b.shape[0]} != backend hidden size {d}")
    if shortcut.config.layer_n > backend.info.num_layers:
        raise ValueError("shortcut layer beyond backend depth")


def shortcut_logits(backend: Backend, shortcut: LinearShortcut, token_ids: Sequence[int]) -> np.ndarray:
    n = shortcut.config.layer_n
    h_n = backend.layer_states(token_ids, upto=n)[n]
    return backend.readout(shortcut(h_n))


def apply_shortcut(backend: Backend, shortcut: LinearShortcut, prompt: str,
                   max_tokens: int = DEFAULT_MAX_TOKENS, mode: str = "iterative") -> GenerationResult:
    """Greedy decoding with the final layers replaced by the shortcut.

    ``mode="iterative"`` uses the shortcut at every step; ``"first_token"``
    uses it for the first token only and the full model afterwards.
    """
    _check_dims(backend, shortcut)
    if mode not in ("iterative", "first_token"):
        raise ValueError("mode must be 'iterative' or 'first_token'")
    start = len(backend.encode(prompt))

    def next_token(ids):
        if mode == "iterative" or len(ids) == start:
            return int(np.argmax(shortcut_logits(backend, shortcut, ids)))
        return int(np.argmax(backend.next_token_logits(ids)))

    return backend.decode_loop(prompt, max_tokens, next_token)


def shortcut_generator(backend, shortcut, mode="iterative"):
    return lambda prompt, max_tokens: apply_shortcut(backend, shortcut, prompt, max_tokens, mode)


@dataclass
class GridSearchResult:
    best: ShortcutConfig
    best_accuracy: float
    table: list[tuple[int, float, int, float]]  # (n, beta, m, accuracy)
    tuning_size: int


def grid_search(backend: Backend, ds: Dataset, language: str, layer_range: Iterable[int],
                beta_range: Iterable[float] = BETA_GRID, m_options: Iterable[int] = M_OPTIONS,
                records: Sequence[ProbeRecord] | None = None,
                template_index: int = DEFAULT_TEMPLATE_INDEX, seed: int = 0,
                max_tokens: int = DEFAULT_MAX_TOKENS, max_tuning_facts: int | None = None,
                mode: str = "iterative") -> GridSearchResult:
    """Choose ``(n, beta, m)`` maximizing shortcut accuracy on a tuning split.

    The tuning split is every probed fact outside the training pool of the
    largest ``m``, so all cells are scored on the same facts.  Ties go to the
    smallest ``n``, then the smallest ``beta``, then the smallest ``m``.
    """
    layers, betas, ms = sorted(set(layer_range)), sorted(set(beta_range)), sorted(set(m_options))
    if not (layers and betas and ms):
        raise ValueError("grid ranges must be non-empty")
    if records is None:
        records = run_probe(ds, backend, language, max_tokens, template_index)
    records = [r for r in records if r.language == language]

    pools = {m: select_training_records(records, m, seed) for m in ms}
    excluded = {r.fact.key for r in pools[ms[-1]]}
    tuning = [r for r in records if r.fact.key not in excluded]
    if max_tuning_facts is not None and len(tuning) > max_tuning_facts:
        pick = np.random.default_rng(seed).choice(len(tuning), max_tuning_facts, replace=False)
        tuning = [tuning[i] for i in sorted(pick)]
    if not tuning:
        raise ValueError("tuning split is empty")

    jac_memo: dict[tuple, tuple] = {}

    def jac(prompt, n):
        if (prompt, n) not in jac_memo:
            jac_memo[(prompt, n)] = backend.jacobian_at(prompt, n)
        return jac_memo[(prompt, n)]

    table = []
    for n in layers:
        for m in ms:
            base = fit_shortcut(backend, ds, language, ShortcutConfig(n, 1.0, m, language), pools[m],
                                template_index, seed, max_tokens, jacobian_fn=jac)
            for beta in betas:
                sc = base.with_beta(beta)
                gen = shortcut_generator(backend, sc, mode)
                hits = sum(probe_fact(backend, r.fact, template_index, max_tokens, generate=gen).correct
                           for r in tuning)
                table.append((n, float(beta), m, hits / len(tuning)))
    n, beta, m, acc = min(table, key=lambda row: (-row[3], row[0], row[1], row[2]))
    return GridSearchResult(ShortcutConfig(n, beta, m, language), acc, table, len(tuning))


@dataclass
class ShortcutEvaluation:
    original_records: dict[str, list[ProbeRecord]]
    shortcut_records: dict[str, list[ProbeRecord]]
    original_accuracy: AccuracyReport
    shortcut_accuracy: AccuracyReport
    original_consistency: ConsistencyMatrix
    shortcut_consistency: ConsistencyMatrix
    original_heldout: AccuracyReport
    shortcut_heldout: AccuracyReport

    def relation_consistency(self) -> tuple[dict[str, float], dict[str, float]]:
        return relation_consistency(self.original_records), relation_consistency(self.shortcut_records)


def evaluate_shortcut(backend: Backend, ds: Dataset, shortcuts: Mapping[str, LinearShortcut],
                      languages: Sequence[str] | None = None,
                      template_index: int = DEFAULT_TEMPLATE_INDEX, max_tokens: int = DEFAULT_MAX_TOKENS,
                      original_records: Mapping[str, Sequence[ProbeRecord]] | None = None,
                      mode: str = "iterative") -> ShortcutEvaluation:
    """Probe every fact with and without the shortcut on identical prompts.

    Accuracy is reported on all samples and, separately, with each
    language's training facts held out.
    """
    langs = list(languages) if languages is not None else sorted(shortcuts)
    missing = [l for l in langs if l not in shortcuts]
    if missing:
        raise ValueError(f"no shortcut fitted for {missing}")
    orig, short = {}, {}
    for lang in langs:
        if original_records is not None and lang in original_records:
            orig[lang] = list(original_records[lang])
        else:
            orig[lang] = run_probe(ds, backend, lang, max_tokens, template_index)
        gen = shortcut_generator(backend, shortcuts[lang], mode)
        short[lang] = [probe_fact(backend, r.fact, template_index, max_tokens, generate=gen)
                       for r in orig[lang]]

    def heldout(recs):
        out = []
        for lang in langs:
            train = set(shortcuts[lang].provenance)
            out.extend(r for r in recs[lang] if r.fact.key not in train)
        return accuracy(out)

    flat = lambda recs: [r for lang in langs for r in recs[lang]]
    return ShortcutEvaluation(orig, short, accuracy(flat(orig)), accuracy(flat(short)),
                              consistency_matrix(orig, langs), consistency_matrix(short, langs),
                              heldout(orig), heldout(short))
