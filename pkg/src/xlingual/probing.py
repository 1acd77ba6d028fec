"""Factual probes judged on the model's full greedy answer."""
from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from statistics import mean
from typing import Callable, Iterable, Sequence

from .backends.base import Backend, GenerationResult
from .io import atomic_write_text, text_hash
from .klar import DEFAULT_TEMPLATE_INDEX, Dataset, FactTriple, RelationSpec, build_prompt

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 16

# matcher(stripped_generation, normalized_gold) -> matched span of the generation or None
Matcher = Callable[[str, str], "str | None"]


class ProbeError(RuntimeError):
    def __init__(self, fact: FactTriple, cause: BaseException):
        super().__init__(f"probe failed for {fact.language}/{fact.relation.relation_name} "
                         f"index {fact.index}: {cause}")
        self.fact = fact


def _is_trim(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith("P")


def strip_answer(text: str) -> str:
    """Drop leading/trailing whitespace and punctuation."""
    start, end = 0, len(text)
    while start < end and _is_trim(text[start]):
        start += 1
    while end > start and _is_trim(text[end - 1]):
        end -= 1
    return text[start:end]


def normalize_answer(text: str) -> str:
    return strip_answer(text).casefold()


def prefix_match(stripped: str, gold_norm: str) -> str | None:
    """Shortest prefix of ``stripped`` whose case-folded form equals the gold."""
    if not stripped.casefold().startswith(gold_norm):
        return None
    for k in range(1, len(stripped) + 1):
        if stripped[:k].casefold() == gold_norm:
            return stripped[:k]
    # case folding expanded a character (e.g. "ß" -> "ss") across the boundary
    return stripped[: len(gold_norm)]


def contains_match(stripped: str, gold_norm: str) -> str | None:
    folded = stripped.casefold()
    pos = folded.find(gold_norm)
    if pos < 0:
        return None
    return stripped[pos: pos + len(gold_norm)]


def judge_answer(generated: str, gold_object: str, language: str | None = None,
                 matcher: Matcher = prefix_match) -> tuple[bool, str | None]:
    """Correct iff the normalized generation starts with the normalized gold object.

    >>> judge_answer(" ottawa, the capital", "Ottawa")
    (True, 'ottawa')
    """
    gold = normalize_answer(gold_object)
    if not gold:
        raise ValueError("gold object normalizes to an empty string")
    span = matcher(strip_answer(generated), gold)
    return (span is not None and span != ""), (span or None)


@dataclass(frozen=True)
class ProbeRecord:
    fact: FactTriple
    prompt: str
    generation: GenerationResult
    correct: bool
    matched_span: str | None = None

    def __post_init__(self):
        if self.correct and not self.matched_span:
            raise ValueError("a correct record needs a matched span")

    @property
    def language(self) -> str:
        return self.fact.language

    @property
    def relation(self) -> str:
        return self.fact.relation.relation_name

    def to_json(self) -> dict:
        return {
            "index": self.fact.index,
            "language": self.fact.language,
            "relation": self.relation,
            "relation_id": self.fact.relation.relation_id,
            "subject": self.fact.subject,
            "object": self.fact.object,
            "prompt": self.prompt,
            "prompt_hash": text_hash(self.prompt),
            "generation": self.generation.text,
            "token_ids": list(self.generation.token_ids),
            "stop_reason": self.generation.stop_reason,
            "correct": self.correct,
            "matched_span": self.matched_span,
        }

    @classmethod
    def from_json(cls, d: dict, ds: Dataset | None = None) -> "ProbeRecord":
        if ds is not None:
            fact = ds.get(d["language"], (d["relation"], d["index"]))
        else:
            rel = RelationSpec(d["relation"], d.get("relation_id", ""), ("<subject>",))
            fact = FactTriple(d["subject"], d["object"], d["index"], d["language"], rel)
        gen = GenerationResult(d["generation"], tuple(d["token_ids"]), d["stop_reason"])
        return cls(fact, d["prompt"], gen, d["correct"], d["matched_span"])


def probe_fact(backend: Backend, fact: FactTriple, template_index: int = DEFAULT_TEMPLATE_INDEX,
               max_tokens: int = DEFAULT_MAX_TOKENS, matcher: Matcher = prefix_match,
               generate: Callable[[str, int], GenerationResult] | None = None) -> ProbeRecord:
    prompt = build_prompt(fact, template_index)
    try:
        gen = (generate or backend.greedy_generate)(prompt, max_tokens)
    except Exception as e:
        raise ProbeError(fact, e) from e
    ok, span = judge_answer(gen.text, fact.object, fact.language, matcher)
    return ProbeRecord(fact, prompt, gen, ok, span)


def run_probe(ds: Dataset, backend: Backend, language: str, max_tokens: int = DEFAULT_MAX_TOKENS,
              template_index: int = DEFAULT_TEMPLATE_INDEX, relations: Iterable[str] | None = None,
              matcher: Matcher = prefix_match) -> list[ProbeRecord]:
    rel_names = ds.relation_names(language) if relations is None else list(relations)
    records = []
    for rel in rel_names:
        for fact in ds.facts_for(language, rel):
            records.append(probe_fact(backend, fact, template_index, max_tokens, matcher))
    return records


@dataclass(frozen=True)
class AccuracyReport:
    per_language: dict[str, float]
    per_relation: dict[tuple[str, str], float]
    counts: dict[str, int]
    relation_counts: dict[tuple[str, str], int]

    @property
    def average(self) -> float:
        """Unweighted mean over languages."""
        return mean(self.per_language.values())

    def relation_table(self) -> dict[str, float]:
        """Per relation: unweighted mean over the languages covering it."""
        by_rel: dict[str, list[float]] = {}
        for (_, rel), v in self.per_relation.items():
            by_rel.setdefault(rel, []).append(v)
        return {rel: mean(vs) for rel, vs in sorted(by_rel.items())}

    @property
    def relation_average(self) -> float:
        return mean(self.relation_table().values())


def accuracy(records: Sequence[ProbeRecord]) -> AccuracyReport:
    lang_tot: dict[str, list[int]] = {}
    rel_tot: dict[tuple[str, str], list[int]] = {}
    for r in records:
        for cell, key in ((lang_tot, r.language), (rel_tot, (r.language, r.relation))):
            c = cell.setdefault(key, [0, 0])
            c[0] += r.correct
            c[1] += 1
    return AccuracyReport(
        per_language={k: c / t for k, (c, t) in sorted(lang_tot.items())},
        per_relation={k: c / t for k, (c, t) in sorted(rel_tot.items())},
        counts={k: t for k, (_, t) in sorted(lang_tot.items())},
        relation_counts={k: t for k, (_, t) in sorted(rel_tot.items())},
    )


def save_records(records: Iterable[ProbeRecord], path: str | Path):
    lines = [json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) for r in records]
    atomic_write_text(path, "".join(l + "\n" for l in lines))


def load_records(path: str | Path, ds: Dataset | None = None,
                 languages: Iterable[str] | None = None) -> list[ProbeRecord]:
    keep = set(languages) if languages is not None else None
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [ProbeRecord.from_json(d, ds) for d in rows if keep is None or d["language"] in keep]


def correct_keys(records: Iterable[ProbeRecord]) -> set[tuple[str, int]]:
    return {r.fact.key for r in records if r.correct}
