import json

import numpy as np
import pytest

from xlingual.backends.base import ModelInfo
from xlingual.baselines import (CachedTranslator, DictionaryTranslator, IdentityTranslator,
                                TranslationError, early_exit_baseline, translation_en_baseline)
from xlingual.klar import load_dataset
from xlingual.probing import accuracy, run_probe

from conftest import ScriptedBackend, write_relation

EN = "What is the capital of {}? The answer is:"
ES = "¿Cuál es la capital de {}? La respuesta es:"
ES_TO_EN = {"Canadá": "Canada", "Alemania": "Germany", "España": "Spain", "Japón": "Japan"}


def en_backend():
    return ScriptedBackend({EN.format("Canada"): " Ottawa", EN.format("Germany"): " Berlin",
                            EN.format("Spain"): " Madrid", EN.format("Japan"): " Kyoto"})


def dictionary():
    table = {(ES.format(es), "en"): EN.format(en) for es, en in ES_TO_EN.items()}
    table.update({("Ottawa", "es"): "Ottawa", ("Berlin", "es"): "Berlín", ("Madrid", "es"): "Madrid",
                  ("Kyoto", "es"): "Kioto"})
    return DictionaryTranslator(table)


def test_identity_translator_matches_plain_probe(four_fact_root):
    ds = load_dataset(four_fact_root)
    b = ScriptedBackend({ES.format("Canadá"): "Ottawa", ES.format("Japón"): "Tokio"})
    res = translation_en_baseline(ds, b, IdentityTranslator(), "es")
    assert res.accuracy == accuracy(run_probe(ds, b, "es")).per_language["es"] == 0.5
    assert res.skipped == 0


def test_dictionary_translation_baseline(four_fact_root):
    ds = load_dataset(four_fact_root)
    res = translation_en_baseline(ds, en_backend(), dictionary(), "es")
    # Ottawa, Berlín, Madrid right; Kioto != Tokio
    assert (res.correct, res.evaluated) == (3, 4)
    assert res.accuracy == 0.75


def test_english_needs_no_translation(four_fact_root):
    ds = load_dataset(four_fact_root)
    t = DictionaryTranslator({})
    res = translation_en_baseline(ds, en_backend(), t, "en")
    assert res.accuracy == 0.75 and t.calls == 0


def test_failed_translations_leave_the_denominator(four_fact_root):
    ds = load_dataset(four_fact_root)
    t = dictionary()
    del t.table[("Kyoto", "es")]
    del t.table[(ES.format("Canadá"), "en")]
    res = translation_en_baseline(ds, en_backend(), t, "es")
    assert (res.correct, res.evaluated, res.skipped) == (2, 2, 2)
    assert res.accuracy == 1.0


class StubLensBackend(ScriptedBackend):
    """Lens at every layer puts all mass on one token that decodes to ``word``."""

    def __init__(self, word):
        super().__init__({})
        self.word = word
        self.info = ModelInfo("stub-lens", 4, 2, 3)

    def decode(self, ids):
        return {0: "?", 1: " " + self.word, 2: "!"}[ids[0]]

    def layer_states(self, token_ids, upto=None):
        return np.zeros(((upto if upto is not None else 4) + 1, 2))

    def readout(self, states):
        return np.tile([0.0, 5.0, 1.0], np.asarray(states).shape[:-1] + (1,))


@pytest.fixture
def zh_root(tmp_path):
    write_relation(tmp_path, "en", "capital", ["<subject>", "What is the capital of <subject>? The answer is:"],
                   [("Canada", "Ottawa", 1)])
    write_relation(tmp_path, "zh", "capital", ["<subject>", "<subject>的首都在哪里？答案是："],
                   [("加拿大", "渥太华", 1)])
    return tmp_path


def test_early_exit_translates_lens_token(zh_root):
    ds = load_dataset(zh_root)
    t = DictionaryTranslator({("Ottawa", "zh"): "渥太华"})
    res = early_exit_baseline(ds, StubLensBackend("Ottawa"), t, "zh", layer=3)
    assert (res.correct, res.evaluated) == (1, 1)
    assert res.details[0]["token"] == "Ottawa"
    res = early_exit_baseline(ds, StubLensBackend("Toronto"), DictionaryTranslator({("Toronto", "zh"): "多伦多"}),
                              "zh", layer=3)
    assert res.accuracy == 0.0
    with pytest.raises(ValueError):
        early_exit_baseline(ds, StubLensBackend("Ottawa"), t, "zh", layer=5)


class CountingClient:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def translate(self, text, source, target):
        self.calls += 1
        return self.inner.translate(text, source, target)


class Broken:
    def translate(self, text, source, target):
        raise ConnectionError("service down")


def test_cache_second_run_makes_no_external_calls(four_fact_root, tmp_path):
    ds = load_dataset(four_fact_root)
    path = tmp_path / "translations.json"
    client = CountingClient(dictionary())
    first = translation_en_baseline(ds, en_backend(), CachedTranslator(client, path), "es")
    calls = client.calls
    assert calls == 8
    cached = CachedTranslator(client, path)
    second = translation_en_baseline(ds, en_backend(), cached, "es")
    assert client.calls == calls and cached.external_calls == 0
    assert (first.correct, first.evaluated) == (second.correct, second.evaluated)
    offline = translation_en_baseline(ds, en_backend(), CachedTranslator(None, path), "es")
    assert offline.accuracy == first.accuracy
    entry = next(iter(json.loads(path.read_text(encoding="utf-8")).values()))
    assert set(entry) == {"text", "source", "target", "translation"}


def test_cache_wraps_client_errors(tmp_path):
    with pytest.raises(TranslationError, match="service down"):
        CachedTranslator(Broken(), tmp_path / "t.json").translate("x", "es", "en")
    with pytest.raises(TranslationError, match="offline"):
        CachedTranslator(None, tmp_path / "t.json").translate("x", "es", "en")


def test_dictionary_from_json(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps([{"text": "Ottawa", "target": "zh", "translation": "渥太华"}], ensure_ascii=False),
                 encoding="utf-8")
    assert DictionaryTranslator.from_json(p).translate("Ottawa", "auto", "zh") == "渥太华"
