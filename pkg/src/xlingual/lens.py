"""Layer-wise logit-lens analyses.

Rank trajectories of gold/English/wrong answers, cosine similarity of
final-token states between languages (parallel facts and the two dissection
controls), language composition of top-k lens tokens, and phase-boundary
detection on averaged curves.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .backends.base import Backend, LayerTrace
from .backends.cache import ActivationCache
from .klar import DEFAULT_TEMPLATE_INDEX, PIVOT_LANGUAGE, Dataset, FactTriple, parallel_pairs
from .probing import ProbeRecord

logger = logging.getLogger(__name__)

CONDITIONS = ("parallel", "dissection1", "dissection2")
# scripts written without inter-word spaces; answers follow the cue directly
UNSPACED_LANGUAGES = frozenset({"zh", "ja"})


# ranks

def rank_in_logits(logits: np.ndarray, token_id: int) -> int:
    """Zero-based rank of ``token_id``; ties go to the lower token id."""
    logits = np.asarray(logits)
    if not 0 <= token_id < logits.shape[-1]:
        raise IndexError(f"token id {token_id} outside vocabulary of {logits.shape[-1]}")
    v = logits[token_id]
    return int(np.count_nonzero(logits > v) + np.count_nonzero(logits[:token_id] == v))


def ranks_in_logits(logits: np.ndarray, token_id: int) -> np.ndarray:
    """Rank per row of a (layers, V) logit array."""
    logits = np.asarray(logits)
    v = logits[:, token_id][:, None]
    return (np.count_nonzero(logits > v, axis=1)
            + np.count_nonzero(logits[:, :token_id] == v, axis=1)).astype(np.int64)


def rank_of(backend: Backend, state: np.ndarray, token_id: int) -> int:
    return rank_in_logits(backend.lens_project(state), token_id)


def top_k_ids(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` token ids per row, descending logit, ties by ascending id."""
    logits = np.atleast_2d(logits)
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[:, :k]


def first_answer_token(backend: Backend, text: str, language: str | None = None,
                       prefix: str | None = None) -> int:
    """First non-whitespace token of ``text`` tokenized as an answer continuation."""
    if prefix is None:
        prefix = "" if language in UNSPACED_LANGUAGES else " "
    for tok in backend.answer_ids(prefix + text):
        if backend.decode([tok]).strip():
            return tok
    raise ValueError(f"answer {text!r} has an empty tokenization")


@dataclass
class RankTrajectory:
    rank_target_correct: np.ndarray
    rank_en_correct: np.ndarray
    rank_target_wrong: np.ndarray | None = None

    @property
    def layers(self) -> np.ndarray:
        return np.arange(len(self.rank_target_correct))

    def series(self) -> dict[str, np.ndarray]:
        out = {"rank_target_correct": self.rank_target_correct, "rank_en_correct": self.rank_en_correct}
        if self.rank_target_wrong is not None:
            out["rank_target_wrong"] = self.rank_target_wrong
        return out


def _trace_logits(backend: Backend, trace: LayerTrace | np.ndarray) -> np.ndarray:
    if isinstance(trace, LayerTrace):
        if trace.lens_logits is not None:
            return trace.lens_logits
        trace = trace.states
    return backend.readout(np.asarray(trace))


def rank_trajectories(backend: Backend, trace: LayerTrace | np.ndarray, gold_target: str | int,
                      gold_en: str | int, wrong_prediction: str | int | None = None,
                      language: str | None = None) -> RankTrajectory:
    """Per-layer lens rank of the first token of each answer.

    Answers may be given as strings or as token ids.
    """
    logits = _trace_logits(backend, trace)

    def tid(a, lang):
        return a if isinstance(a, (int, np.integer)) else first_answer_token(backend, a, lang)

    wrong = None
    if wrong_prediction is not None:
        wrong = ranks_in_logits(logits, tid(wrong_prediction, language))
    return RankTrajectory(ranks_in_logits(logits, tid(gold_target, language)),
                          ranks_in_logits(logits, tid(gold_en, PIVOT_LANGUAGE)), wrong)


@dataclass
class AveragedCurves:
    """Mean and median of several per-layer series over samples."""
    mean: dict[str, np.ndarray]
    median: dict[str, np.ndarray]
    count: int

    def to_long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "series", "statistic", "value"])
        for stat, table in (("mean", self.mean), ("median", self.median)):
            for name in sorted(table):
                for layer, v in enumerate(table[name]):
                    w.writerow([layer, name, stat, f"{v:.6f}"])
        return buf.getvalue()


def average_trajectories(trajectories: Sequence[RankTrajectory]) -> AveragedCurves:
    if not trajectories:
        raise ValueError("no trajectories to average")
    names = set(trajectories[0].series())
    for t in trajectories[1:]:
        names &= set(t.series())
    stacked = {n: np.stack([t.series()[n] for t in trajectories]).astype(float) for n in sorted(names)}
    return AveragedCurves({n: a.mean(0) for n, a in stacked.items()},
                          {n: np.median(a, 0) for n, a in stacked.items()}, len(trajectories))


def _states_by_key(ds: Dataset, backend: Backend, language: str, template_index: int,
                   cache: ActivationCache | None) -> dict[tuple[str, int], np.ndarray]:
    cache = cache or ActivationCache()
    out = {}
    for rel in ds.relation_names(language):
        facts = ds.facts_for(language, rel)
        for f, s in zip(facts, cache.states(backend, facts, template_index)):
            out[f.key] = s
    return out


def dataset_rank_trajectories(ds: Dataset, backend: Backend, records: Iterable[ProbeRecord],
                              kind: str = "correct", template_index: int = DEFAULT_TEMPLATE_INDEX,
                              cache: ActivationCache | None = None) -> list[RankTrajectory]:
    """Trajectories over probe records.

    ``kind="correct"``: records answered correctly (any language, English
    counterpart from the pivot facts).  ``kind="wrong"``: records wrong in
    their language whose English parallel fact was answered correctly, with
    the model's own first answer token as ``rank_target_wrong``.
    """
    records = list(records)
    en_correct = {r.fact.key for r in records if r.language == PIVOT_LANGUAGE and r.correct}
    if kind == "correct":
        chosen = [r for r in records if r.correct]
    elif kind == "wrong":
        chosen = [r for r in records if not r.correct and r.language != PIVOT_LANGUAGE
                  and r.fact.key in en_correct and r.generation.text.strip()]
    else:
        raise ValueError("kind must be 'correct' or 'wrong'")
    states: dict[str, dict] = {}
    out = []
    for r in chosen:
        if r.language not in states:
            states[r.language] = _states_by_key(ds, backend, r.language, template_index, cache)
        en_fact = ds.get(PIVOT_LANGUAGE, r.fact.key)
        wrong = None
        if kind == "wrong":
            wrong = next((t for t in r.generation.token_ids if backend.decode([t]).strip()), None)
            if wrong is None:
                continue
        try:
            out.append(rank_trajectories(backend, states[r.language][r.fact.key], r.fact.object,
                                         en_fact.object, wrong, r.language))
        except ValueError as e:
            logger.warning("skipping %s/%s: %s", r.language, r.fact.key, e)
    return out


@dataclass(frozen=True)
class PhaseBoundaries:
    extraction_onset: int | None
    divergence: int | None


def phase_boundaries(rank_target: Sequence[float], rank_en: Sequence[float],
                     rel_tol: float = 0.01) -> PhaseBoundaries:
    """Extraction onset and English/target divergence on averaged rank curves.

    Onset is the layer ending the largest single-layer drop of the target
    rank.  Divergence is the first layer (not before the onset) from which the
    English rank rises for two consecutive layers while the target rank keeps
    falling.  Changes smaller than ``rel_tol`` times a curve's range are noise;
    a boundary that never clears it is reported as ``None``.
    """
    t = np.asarray(rank_target, float)
    e = np.asarray(rank_en, float)
    res_t = rel_tol * (t.max() - t.min())
    res_e = rel_tol * (e.max() - e.min())

    onset = None
    drops = t[:-1] - t[1:]
    if drops.size and t.max() > t.min() and drops.max() > res_t:
        onset = int(np.argmax(drops)) + 1

    divergence = None
    if e.max() > e.min():
        for l in range(onset or 0, len(t) - 2):
            en_rises = e[l + 1] - e[l] > res_e and e[l + 2] - e[l + 1] > res_e
            t_falls = t[l + 1] <= t[l] + res_t and t[l + 2] <= t[l + 1] + res_t and t[l + 2] < t[l] - res_t
            if en_rises and t_falls:
                divergence = l
                break
    return PhaseBoundaries(onset, divergence)


# similarity

def cosine_per_layer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.divide((a * b).sum(-1), denom, out=np.zeros(denom.shape), where=denom > 0)


@dataclass
class SimilarityCurve:
    condition: str
    lang_pair: tuple[str, str]
    values: np.ndarray
    num_pairs: int

    def peak_layer(self) -> int:
        return int(np.argmax(self.values))


def condition_pairs(ds: Dataset, lang_a: str, lang_b: str, condition: str,
                    seed: int = 0) -> list[tuple[FactTriple, FactTriple]]:
    """Fact pairs for a similarity condition.

    ``parallel``: shared relation and index.  ``dissection1``: one partner per
    parallel pair from the same relation with a different index and object.
    ``dissection2``: one partner per parallel pair from a different relation
    with a different object.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}")
    par = parallel_pairs(ds, lang_a, lang_b)
    if condition == "parallel":
        return par
    rng = np.random.default_rng(seed)
    pool = ds.facts_for(lang_b)
    by_rel: dict[str, list[FactTriple]] = {}
    for f in pool:
        by_rel.setdefault(f.relation.relation_name, []).append(f)
    out = []
    for fa, fb in par:
        rel = fa.relation.relation_name
        if condition == "dissection1":
            cands = [f for f in by_rel[rel] if f.index != fb.index and f.object != fb.object]
        else:
            cands = [f for r, fs in by_rel.items() if r != rel for f in fs if f.object != fb.object]
        if cands:
            out.append((fa, cands[int(rng.integers(len(cands)))]))
    return out


def similarity_from_states(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    curves = [cosine_per_layer(a, b) for a, b in pairs]
    if not curves:
        raise ValueError("no eligible pairs")
    return np.mean(curves, axis=0)


def similarity_curves(ds: Dataset, backend: Backend, lang_pair: tuple[str, str], condition: str = "parallel",
                      template_index: int = DEFAULT_TEMPLATE_INDEX, seed: int = 0,
                      cache: ActivationCache | None = None) -> SimilarityCurve:
    lang_a, lang_b = lang_pair
    pairs = condition_pairs(ds, lang_a, lang_b, condition, seed)
    if not pairs:
        raise ValueError(f"no eligible pairs for {condition} on {lang_a}-{lang_b}")
    cache = cache or ActivationCache()
    sa = _states_by_key(ds, backend, lang_a, template_index, cache)
    sb = sa if lang_b == lang_a else _states_by_key(ds, backend, lang_b, template_index, cache)
    values = similarity_from_states((sa[fa.key], sb[fb.key]) for fa, fb in pairs)
    return SimilarityCurve(condition, (lang_a, lang_b), values, len(pairs))


def curves_to_long_csv(curves: Sequence[SimilarityCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "series", "value"])
    for c in curves:
        name = f"{c.condition}:{c.lang_pair[0]}-{c.lang_pair[1]}"
        for layer, v in enumerate(c.values):
            w.writerow([layer, name, f"{v:.6f}"])
    return buf.getvalue()


# language composition

class LanguageIdOracle(Protocol):
    def classify(self, token_text: str) -> tuple[str, float]: ...


class DictionaryOracle:
    """Fixed token -> language table; unknown tokens get confidence 0."""

    def __init__(self, table: Mapping[str, str], default: str = "unknown"):
        self.table = dict(table)
        self.default = default

    def classify(self, token_text):
        if token_text in self.table:
            return self.table[token_text], 1.0
        return self.default, 0.0


class LangidOracle:
    """``langid`` (bundled off-the-shelf model) with normalized probabilities."""

    def __init__(self, languages: Iterable[str] | None = None):
        from langid.langid import LanguageIdentifier, model

        self._identifier = LanguageIdentifier.from_modelstring(model, norm_probs=True)
        if languages is not None:
            self._identifier.set_languages(sorted(languages))

    def classify(self, token_text):
        label, prob = self._identifier.classify(token_text)
        return label, float(prob)


class FastTextOracle:
    """fastText ``lid.176`` model read from a local path (``fasttext`` must be installed)."""

    def __init__(self, model_path: str):
        import fasttext

        self._model = fasttext.load_model(model_path)

    def classify(self, token_text):
        labels, probs = self._model.predict(token_text.replace("\n", " "), k=1)
        return labels[0].removeprefix("__label__"), float(probs[0])


@dataclass
class LanguageComposition:
    layers: list[dict[str, float]]
    k: int
    confidence_threshold: float
    num_facts: int = 0

    def to_long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "language", "fraction"])
        for layer, hist in enumerate(self.layers):
            for label in sorted(hist):
                w.writerow([layer, label, f"{hist[label]:.6f}"])
        return buf.getvalue()


@dataclass
class _OracleMemo:
    oracle: LanguageIdOracle
    memo: dict = field(default_factory=dict)

    def __call__(self, text: str):
        if text not in self.memo:
            try:
                self.memo[text] = self.oracle.classify(text)
            except Exception as e:  # one bad token must not sink the analysis
                logger.warning("language oracle failed on %r: %s", text, e)
                self.memo[text] = None
        return self.memo[text]


def composition_from_tokens(per_fact_layers: Sequence[Sequence[Sequence[str]]], oracle: LanguageIdOracle,
                            k: int = 10, threshold: float = 0.5,
                            _memo: _OracleMemo | None = None) -> LanguageComposition:
    """Composition from decoded top-k tokens, indexed ``[fact][layer][rank]``.

    Each layer's fractions count labels among the ``k`` tokens with confidence
    at least ``threshold`` and are averaged over facts.
    """
    if not per_fact_layers:
        raise ValueError("no facts")
    classify = _memo or _OracleMemo(oracle)
    num_layers = len(per_fact_layers[0])
    totals = [dict() for _ in range(num_layers)]
    for layers in per_fact_layers:
        for l, tokens in enumerate(layers):
            for text in tokens[:k]:
                text = text.strip()
                res = classify(text) if text else None
                if res is None or res[1] < threshold:
                    continue
                totals[l][res[0]] = totals[l].get(res[0], 0) + 1
    n = len(per_fact_layers)
    # integer counts over (k * facts) keep each layer's total at or below 1 exactly
    return LanguageComposition([{lab: c / (k * n) for lab, c in t.items()} for t in totals], k, threshold, n)


def language_composition(ds: Dataset, backend: Backend, input_language: str, oracle: LanguageIdOracle,
                         k: int = 10, threshold: float = 0.5, template_index: int = DEFAULT_TEMPLATE_INDEX,
                         cache: ActivationCache | None = None) -> LanguageComposition:
    states = _states_by_key(ds, backend, input_language, template_index, cache)
    token_text: dict[int, str] = {}
    per_fact = []
    for key in sorted(states):
        ids = top_k_ids(backend.readout(states[key]), k)
        layers = []
        for row in ids:
            for t in row:
                if int(t) not in token_text:
                    token_text[int(t)] = backend.decode([int(t)])
            layers.append([token_text[int(t)] for t in row])
        per_fact.append(layers)
    return composition_from_tokens(per_fact, oracle, k, threshold)
