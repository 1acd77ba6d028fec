"""Loading, validation and alignment of KLAR-format parallel fact files.

Directory layout is ``<root>/<lang>/<relation_name>.json``; each file holds one
relation for one language::

    {
        "relation_name": "capital",
        "relation_id": "P36",
        "prompt_templates": ["What is the capital of <subject>? The answer is:", ...],
        "samples": [{"subject": "Azerbaijan", "object": "Baku", "index": 6152}, ...]
    }
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

PIVOT_LANGUAGE = "en"
SUBJECT_PLACEHOLDER = "<subject>"
# "What is the capital of <subject>? The answer is:" is the second template
# of the released capital relation.
DEFAULT_TEMPLATE_INDEX = 1

_RELATION_KEYS = ("relation_name", "relation_id", "prompt_templates", "samples")
_SAMPLE_KEYS = ("subject", "object", "index")


class DatasetError(ValueError):
    """Raised for schema or alignment violations in KLAR files."""


@dataclass(frozen=True)
class RelationSpec:
    relation_name: str
    relation_id: str
    prompt_templates: tuple[str, ...]

    def __post_init__(self):
        if not self.prompt_templates:
            raise DatasetError(f"relation {self.relation_name!r}: empty prompt_templates")
        for t in self.prompt_templates:
            if t.count(SUBJECT_PLACEHOLDER) != 1:
                raise DatasetError(
                    f"relation {self.relation_name!r}: template {t!r} must contain "
                    f"exactly one {SUBJECT_PLACEHOLDER}"
                )


@dataclass(frozen=True)
class FactTriple:
    subject: str
    object: str
    index: int
    language: str
    relation: RelationSpec

    @property
    def key(self) -> tuple[str, int]:
        """Cross-lingual alignment key (relation name, index)."""
        return (self.relation.relation_name, self.index)


@dataclass(frozen=True)
class Dataset:
    languages: frozenset[str]
    relations: dict[str, dict[str, RelationSpec]]  # language -> relation name -> spec
    facts: tuple[FactTriple, ...]
    _by_lang: dict = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "languages", frozenset(self.languages))
        object.__setattr__(self, "facts", tuple(sorted(self.facts, key=lambda f: (f.language, f.key))))
        by_lang: dict[str, dict[tuple[str, int], FactTriple]] = {l: {} for l in self.languages}
        for f in self.facts:
            if f.language not in by_lang:
                raise DatasetError(f"fact language {f.language!r} not in dataset languages")
            if f.key in by_lang[f.language]:
                raise DatasetError(f"duplicate index {f.index} for {f.language}/{f.key[0]}")
            by_lang[f.language][f.key] = f
        object.__setattr__(self, "_by_lang", by_lang)

    def facts_for(self, language: str, relation: str | None = None) -> list[FactTriple]:
        self._check_language(language)
        facts = self._by_lang[language].values()
        if relation is not None:
            facts = [f for f in facts if f.relation.relation_name == relation]
        return sorted(facts, key=lambda f: f.key)

    def get(self, language: str, key: tuple[str, int]) -> FactTriple:
        self._check_language(language)
        return self._by_lang[language][key]

    def relation_names(self, language: str | None = None) -> list[str]:
        if language is None:
            names = set()
            for rels in self.relations.values():
                names.update(rels)
            return sorted(names)
        self._check_language(language)
        return sorted(self.relations[language])

    def subset(self, languages: Iterable[str] | None = None,
               relations: Iterable[str] | None = None) -> "Dataset":
        langs = frozenset(languages) if languages is not None else self.languages
        for l in langs:
            self._check_language(l)
        rel_set = set(relations) if relations is not None else None
        keep = lambda name: rel_set is None or name in rel_set
        return Dataset(
            languages=langs,
            relations={l: {n: r for n, r in self.relations[l].items() if keep(n)} for l in langs},
            facts=tuple(f for f in self.facts
                        if f.language in langs and keep(f.relation.relation_name)),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for lang in sorted(self.languages):
            for name in sorted(self.relations[lang]):
                h.update(json.dumps(_relation_payload(self, lang, name), ensure_ascii=False,
                                    sort_keys=True).encode("utf-8"))
        return h.hexdigest()[:16]

    def _check_language(self, language: str):
        if language not in self.languages:
            raise KeyError(f"unknown language {language!r}; dataset has {sorted(self.languages)}")


def _parse_relation(payload: dict, path: Path, language: str) -> tuple[RelationSpec, list[FactTriple]]:
    if not isinstance(payload, dict):
        raise DatasetError(f"{path}: top-level JSON value must be an object")
    missing = [k for k in _RELATION_KEYS if k not in payload]
    if missing:
        raise DatasetError(f"{path}: missing required field(s) {missing}")
    extra = set(payload) - set(_RELATION_KEYS)
    if extra:
        logger.warning("%s: ignoring unknown field(s) %s", path, sorted(extra))
    templates = payload["prompt_templates"]
    if not isinstance(templates, list) or not all(isinstance(t, str) for t in templates):
        raise DatasetError(f"{path}: prompt_templates must be a list of strings")
    try:
        spec = RelationSpec(str(payload["relation_name"]), str(payload["relation_id"]), tuple(templates))
    except DatasetError as e:
        raise DatasetError(f"{path}: {e}") from None

    facts = []
    for i, s in enumerate(payload["samples"]):
        missing = [k for k in _SAMPLE_KEYS if k not in s]
        if missing:
            raise DatasetError(f"{path}: sample {i} missing field(s) {missing}")
        if not s["subject"] or not s["object"]:
            raise DatasetError(f"{path}: sample {i} has empty subject or object")
        if isinstance(s["index"], bool) or not isinstance(s["index"], int):
            raise DatasetError(f"{path}: sample {i} index must be an integer")
        facts.append(FactTriple(s["subject"], s["object"], s["index"], language, spec))
    return spec, facts


def load_dataset(root_path: str | Path, languages: Iterable[str] | None = None) -> Dataset:
    """Load and validate ``<root>/<lang>/<relation>.json`` files.

    ``languages`` defaults to every language directory under ``root``.
    Every index present in a non-pivot language must also exist in the pivot
    language, and each relation must carry the same index set in every
    language covering it.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if languages is None:
        languages = sorted(p.name for p in root.iterdir() if p.is_dir())
    languages = frozenset(languages)

    relations: dict[str, dict[str, RelationSpec]] = {}
    facts: list[FactTriple] = []
    for lang in sorted(languages):
        lang_dir = root / lang
        files = sorted(lang_dir.glob("*.json")) if lang_dir.is_dir() else []
        if not files:
            raise DatasetError(f"no relation files found for language {lang!r} under {root}")
        relations[lang] = {}
        for path in files:
            with open(path, encoding="utf-8") as fh:
                try:
                    payload = json.load(fh)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"{path}: invalid JSON ({e})") from None
            spec, rel_facts = _parse_relation(payload, path, lang)
            relations[lang][spec.relation_name] = spec
            facts.extend(rel_facts)
    if not facts and not any(relations.values()):
        raise DatasetError(f"no relation files found under {root}")

    ds = Dataset(languages=languages, relations=relations, facts=tuple(facts))
    _check_alignment(ds)
    return ds


def _check_alignment(ds: Dataset):
    index_sets: dict[str, dict[str, set[int]]] = {}
    for f in ds.facts:
        index_sets.setdefault(f.relation.relation_name, {}).setdefault(f.language, set()).add(f.index)
    for rel, per_lang in index_sets.items():
        langs = sorted(per_lang)
        reference_lang = PIVOT_LANGUAGE if PIVOT_LANGUAGE in per_lang else langs[0]
        reference = per_lang[reference_lang]
        for lang in langs:
            diff = per_lang[lang] ^ reference
            if diff:
                raise DatasetError(
                    f"alignment violation in relation {rel!r}: indices {sorted(diff)} differ "
                    f"between {lang!r} and {reference_lang!r}"
                )


def _relation_payload(ds: Dataset, language: str, relation: str) -> dict:
    spec = ds.relations[language][relation]
    return {
        "relation_name": spec.relation_name,
        "relation_id": spec.relation_id,
        "prompt_templates": list(spec.prompt_templates),
        "samples": [{"subject": f.subject, "object": f.object, "index": f.index}
                    for f in ds.facts_for(language, relation)],
    }


def save_dataset(ds: Dataset, root_path: str | Path):
    """Write ``ds`` back out in the layout :func:`load_dataset` reads."""
    root = Path(root_path)
    for lang in sorted(ds.languages):
        (root / lang).mkdir(parents=True, exist_ok=True)
        for name in ds.relation_names(lang):
            with open(root / lang / f"{name}.json", "w", encoding="utf-8") as fh:
                json.dump(_relation_payload(ds, lang, name), fh, ensure_ascii=False, indent=4)


def parallel_pairs(ds: Dataset, lang_a: str, lang_b: str) -> list[tuple[FactTriple, FactTriple]]:
    """Facts sharing relation and index in both languages, sorted by key."""
    a = {f.key: f for f in ds.facts_for(lang_a)}
    b = {f.key: f for f in ds.facts_for(lang_b)}
    return [(a[k], b[k]) for k in sorted(a.keys() & b.keys())]


def build_prompt(fact: FactTriple, template_index: int = DEFAULT_TEMPLATE_INDEX) -> str:
    templates = fact.relation.prompt_templates
    if not 0 <= template_index < len(templates):
        raise IndexError(
            f"template_index {template_index} out of range for relation "
            f"{fact.relation.relation_name!r} ({len(templates)} templates)"
        )
    # plain str.replace: subjects are never interpreted as patterns
    return templates[template_index].replace(SUBJECT_PLACEHOLDER, fact.subject)


def iter_prompts(facts: Iterable[FactTriple], template_index: int = DEFAULT_TEMPLATE_INDEX
                 ) -> Iterator[tuple[FactTriple, str]]:
    for f in facts:
        yield f, build_prompt(f, template_index)
