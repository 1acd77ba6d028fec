"""Translation-based baselines behind a pluggable translator client."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .backends.base import Backend
from .io import atomic_write_json, text_hash
from .klar import DEFAULT_TEMPLATE_INDEX, PIVOT_LANGUAGE, Dataset, build_prompt
from .probing import DEFAULT_MAX_TOKENS, judge_answer

logger = logging.getLogger(__name__)

AUTO = "auto"
# early-exit extraction layer defaults, matching the shortcut layers
EARLY_EXIT_LAYERS = {"bloom": 21, "llama2": 30}


class TranslationError(RuntimeError):
    pass


class TranslatorClient(Protocol):
    def translate(self, text: str, source: str, target: str) -> str: ...


class IdentityTranslator:
    def translate(self, text, source, target):
        return text


class DictionaryTranslator:
    """Lookup table keyed by ``(text, target)``; misses raise :class:`TranslationError`."""

    def __init__(self, table: Mapping[tuple[str, str], str]):
        self.table = dict(table)
        self.calls = 0

    @classmethod
    def from_json(cls, path: str | Path):
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({(r["text"], r["target"]): r["translation"] for r in rows})

    def translate(self, text, source, target):
        self.calls += 1
        try:
            return self.table[(text, target)]
        except KeyError:
            raise TranslationError(f"no translation of {text!r} into {target}") from None


class CachedTranslator:
    """Content-addressed, file-backed cache in front of another client.

    ``client=None`` makes the cache read-only: misses raise
    :class:`TranslationError` without any external call.
    """

    def __init__(self, client: TranslatorClient | None, path: str | Path | None = None):
        self.client = client
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            self.entries = json.loads(self.path.read_text(encoding="utf-8"))
        self.external_calls = 0

    def translate(self, text, source, target):
        key = text_hash(text, source, target)
        if key in self.entries:
            return self.entries[key]["translation"]
        if self.client is None:
            raise TranslationError(f"cache miss for {text!r} ({source}->{target}) in offline mode")
        self.external_calls += 1
        try:
            out = self.client.translate(text, source, target)
        except TranslationError:
            raise
        except Exception as e:
            raise TranslationError(f"translator failed on {text!r}: {e}") from e
        self.entries[key] = {"text": text, "source": source, "target": target, "translation": out}
        if self.path is not None:
            atomic_write_json(self.path, self.entries)
        return out


@dataclass
class BaselineResult:
    method: str  # "translation_en" | "translation_early_exit"
    language: str
    correct: int
    evaluated: int
    skipped: int = 0
    details: list[dict] = field(default_factory=list, repr=False)

    @property
    def accuracy(self) -> float:
        return self.correct / self.evaluated if self.evaluated else float("nan")


def _translate(translator, text, source, target):
    if source == target:
        return text
    return translator.translate(text, source, target)


def translation_en_baseline(ds: Dataset, backend: Backend, translator: TranslatorClient, language: str,
                            template_index: int = DEFAULT_TEMPLATE_INDEX,
                            max_tokens: int = DEFAULT_MAX_TOKENS) -> BaselineResult:
    """Query translated to English, answered in English, answer translated back."""
    res = BaselineResult("translation_en", language, 0, 0)
    for fact in ds.facts_for(language):
        prompt = build_prompt(fact, template_index)
        try:
            en_prompt = _translate(translator, prompt, language, PIVOT_LANGUAGE)
            answer = backend.greedy_generate(en_prompt, max_tokens).text
            back = _translate(translator, answer.strip(), PIVOT_LANGUAGE, language)
        except TranslationError as e:
            logger.warning("translation failed for %s/%s: %s", language, fact.key, e)
            res.skipped += 1
            continue
        ok, _ = judge_answer(back, fact.object, language)
        res.evaluated += 1
        res.correct += ok
        res.details.append({"key": list(fact.key), "answer": answer, "translated": back, "correct": ok})
    return res


def early_exit_baseline(ds: Dataset, backend: Backend, translator: TranslatorClient, language: str,
                        layer: int = EARLY_EXIT_LAYERS["bloom"],
                        template_index: int = DEFAULT_TEMPLATE_INDEX) -> BaselineResult:
    """Top logit-lens token at ``layer``, translated into ``language``."""
    if not 0 <= layer <= backend.info.num_layers:
        raise ValueError(f"layer {layer} outside [0, {backend.info.num_layers}]")
    res = BaselineResult("translation_early_exit", language, 0, 0)
    for fact in ds.facts_for(language):
        ids = backend.encode(build_prompt(fact, template_index))
        h = backend.layer_states(ids, upto=layer)[layer]
        token = backend.decode([int(np.argmax(backend.readout(h)))]).strip()
        try:
            translated = translator.translate(token, AUTO, language) if token else ""
        except TranslationError as e:
            logger.warning("translation failed for %s/%s: %s", language, fact.key, e)
            res.skipped += 1
            continue
        ok, _ = judge_answer(translated, fact.object, language)
        res.evaluated += 1
        res.correct += ok
        res.details.append({"key": list(fact.key), "token": token, "translated": translated, "correct": ok})
    return res
