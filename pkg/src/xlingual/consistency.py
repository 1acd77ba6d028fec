"""Cross-lingual consistency: overlap of correctly answered parallel facts."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from itertools import combinations
from statistics import mean
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .probing import ProbeRecord

DENOMINATORS = ("union", "min")


def overlap_consistency(correct_a: set[Hashable], correct_b: set[Hashable],
                        denominator: str = "union") -> float:
    """``|A & B| / |A | B|`` (Jaccard), or ``/ min(|A|, |B|)``; 0 when undefined."""
    inter = len(correct_a & correct_b)
    if denominator == "union":
        denom = len(correct_a | correct_b)
    elif denominator == "min":
        denom = min(len(correct_a), len(correct_b))
    else:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    return inter / denom if denom else 0.0


@dataclass(frozen=True)
class ConsistencyMatrix:
    languages: tuple[str, ...]
    values: np.ndarray
    denominator: str = "union"

    def __getitem__(self, pair: tuple[str, str]) -> float:
        a, b = pair
        return float(self.values[self.languages.index(a), self.languages.index(b)])

    def pairwise_average(self) -> float:
        """Mean over unordered pairs of distinct languages."""
        iu = np.triu_indices(len(self.languages), k=1)
        return float(self.values[iu].mean()) if iu[0].size else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["language", *self.languages])
        for i, lang in enumerate(self.languages):
            w.writerow([lang, *(f"{v:.6f}" for v in self.values[i])])
        return buf.getvalue()

    def to_long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lang_a", "lang_b", "value"])
        for i, a in enumerate(self.languages):
            for j, b in enumerate(self.languages):
                w.writerow([a, b, f"{self.values[i, j]:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"languages": list(self.languages), "denominator": self.denominator,
                           "values": np.round(self.values, 6).tolist()}, indent=2) + "\n"


def _by_language(records: Iterable[ProbeRecord] | Mapping[str, Sequence[ProbeRecord]]):
    if isinstance(records, Mapping):
        return {k: list(v) for k, v in records.items()}
    out: dict[str, list[ProbeRecord]] = {}
    for r in records:
        out.setdefault(r.language, []).append(r)
    return out


def consistency_matrix(records_by_language, languages: Sequence[str] | None = None,
                       denominator: str = "union") -> ConsistencyMatrix:
    """Pairwise overlap over each pair's shared probed facts.

    ``records_by_language`` is a mapping language -> records or a flat
    iterable of records.
    """
    by_lang = _by_language(records_by_language)
    langs = tuple(languages) if languages is not None else tuple(sorted(by_lang))
    for l in langs:
        if not by_lang.get(l):
            raise ValueError(f"language {l!r} has no probed facts")
    probed = {l: {r.fact.key for r in by_lang[l]} for l in langs}
    correct = {l: {r.fact.key for r in by_lang[l] if r.correct} for l in langs}
    k = len(langs)
    values = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            shared = probed[langs[i]] & probed[langs[j]]
            v = overlap_consistency(correct[langs[i]] & shared, correct[langs[j]] & shared, denominator)
            values[i, j] = values[j, i] = v
    return ConsistencyMatrix(langs, values, denominator)


def relation_consistency(records_by_language, languages: Sequence[str] | None = None,
                         denominator: str = "union") -> dict[str, float]:
    """Per relation: mean pairwise overlap over distinct language pairs."""
    by_lang = _by_language(records_by_language)
    langs = tuple(languages) if languages is not None else tuple(sorted(by_lang))
    relations = sorted({r.relation for l in langs for r in by_lang[l]})
    out = {}
    for rel in relations:
        sub = {l: [r for r in by_lang[l] if r.relation == rel] for l in langs}
        covered = [l for l in langs if sub[l]]
        pairs = list(combinations(covered, 2))
        if not pairs:
            continue
        m = consistency_matrix(sub, covered, denominator)
        out[rel] = mean(m[a, b] for a, b in pairs)
    return out


def relation_average_consistency(records_by_language, languages=None, denominator="union") -> float:
    """Unweighted mean over relations of per-relation pairwise consistency."""
    return mean(relation_consistency(records_by_language, languages, denominator).values())
