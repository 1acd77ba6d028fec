import json
from pathlib import Path

import numpy as np
import pytest

from xlingual.backends.base import Backend, GenerationResult, ModelInfo
from xlingual.backends.synthetic import ByteTokenizer

CAPITAL_TEMPLATES_EN = [
    "Where is <subject>'s capital located? The answer is:",
    "What is the capital of <subject>? The answer is:",
    "Which city serves as the capital of <subject>? The answer is:",
    "Name the capital city of <subject>. The answer is:",
    "Where does <subject> have its capital? The answer is:",
]

ES_CAPITAL_TEMPLATES = ["¿Dónde está la capital de <subject>? La respuesta es:",
                        "¿Cuál es la capital de <subject>? La respuesta es:"]


def write_relation(root: Path, lang: str, name: str, templates, samples, relation_id="P0", **extra):
    d = root / lang
    d.mkdir(parents=True, exist_ok=True)
    payload = {"relation_name": name, "relation_id": relation_id, "prompt_templates": list(templates),
               "samples": [{"subject": s, "object": o, "index": i} for s, o, i in samples], **extra}
    (d / f"{name}.json").write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


@pytest.fixture
def four_fact_root(tmp_path):
    """en/es capital facts, indices 1..4, fully parallel."""
    en = [("Canada", "Ottawa", 1), ("Germany", "Berlin", 2), ("Spain", "Madrid", 3), ("Japan", "Tokyo", 4)]
    es = [("Canadá", "Ottawa", 1), ("Alemania", "Berlín", 2), ("España", "Madrid", 3), ("Japón", "Tokio", 4)]
    write_relation(tmp_path, "en", "capital", CAPITAL_TEMPLATES_EN, en, "P36")
    write_relation(tmp_path, "es", "capital", ES_CAPITAL_TEMPLATES, es, "P36")
    return tmp_path


class ScriptedBackend(Backend):
    """Answers prompts from a table; nothing else about it is model-like."""

    def __init__(self, answers, default="???"):
        self.answers = dict(answers)
        self.default = default
        self.tokenizer = ByteTokenizer()
        self.eos_token_id = None
        self.calls = 0
        self.info = ModelInfo("scripted", 2, 4, 257)

    def encode(self, text):
        return self.tokenizer.encode(text)

    def decode(self, ids):
        return self.tokenizer.decode(ids)

    def layer_states(self, token_ids, upto=None):
        raise NotImplementedError

    def run_from(self, token_ids, n, h_n):
        raise NotImplementedError

    def readout(self, states):
        raise NotImplementedError

    def greedy_generate(self, prompt, max_tokens=16):
        self.calls += 1
        text = self.answers.get(prompt, self.default)
        return GenerationResult(text, tuple(self.encode(text)), "newline")


@pytest.fixture(scope="session")
def tiny_tokenizer():
    transformers = pytest.importorskip("transformers")
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers

    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(vocab_size=320, initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
                                  special_tokens=["</s>"])
    tok.train_from_iterator(["What is the capital of Canada? The answer is: Ottawa",
                             "加拿大的首都在哪里？答案是：渥太华"], trainer)
    return transformers.PreTrainedTokenizerFast(tokenizer_object=tok, eos_token="</s>")


def _tiny_model(arch, vocab_size):
    import torch
    from transformers import BloomConfig, BloomForCausalLM, LlamaConfig, LlamaForCausalLM

    torch.manual_seed(0)
    if arch == "bloom":
        model = BloomForCausalLM(BloomConfig(vocab_size=vocab_size, hidden_size=16, n_layer=3, n_head=2))
    else:
        model = LlamaForCausalLM(LlamaConfig(vocab_size=vocab_size, hidden_size=16, intermediate_size=32,
                                             num_hidden_layers=3, num_attention_heads=2,
                                             num_key_value_heads=2, max_position_embeddings=128))
    return model.double()


@pytest.fixture(scope="session", params=["bloom", "llama"])
def tiny_hf(request, tiny_tokenizer):
    from xlingual.backends.hf import HFBackend

    return HFBackend(_tiny_model(request.param, len(tiny_tokenizer)), tiny_tokenizer,
                     name=f"tiny-{request.param}")


def random_prompts(n, seed=0, alphabet="abcdefghijklmnopqrstuvwxyz ?:"):
    rng = np.random.default_rng(seed)
    return ["".join(rng.choice(list(alphabet), size=rng.integers(3, 20))) for _ in range(n)]


def make_fact(lang, index, relation="capital", obj="x", subject="s"):
    from xlingual.klar import RelationSpec, FactTriple

    return FactTriple(subject, obj, index, lang, RelationSpec(relation, "P0", ("<subject>",)))


def make_records(lang, correct_indices, probed_indices, relation="capital"):
    """Probe records for ``probed_indices``; those in ``correct_indices`` are marked correct."""
    from xlingual.probing import ProbeRecord

    out = []
    for i in probed_indices:
        ok = i in correct_indices
        out.append(ProbeRecord(make_fact(lang, i, relation), "p", GenerationResult("x", (), "newline"),
                               ok, "x" if ok else None))
    return out


SYNTH_TEMPLATES = {
    ("en", "capital"): ["Capital of <subject>?", "What is the capital of <subject>? The answer is:"],
    ("en", "color"): ["Color of <subject>?", "The color of <subject> is"],
    ("es", "capital"): ES_CAPITAL_TEMPLATES,
    ("es", "color"): ["¿Color de <subject>?", "El color de <subject> es"],
}


def self_consistent_root(root, backend, languages=("en",), relations=("capital", "color"), per_relation=12,
                         seed=0, wrong_languages=(), max_tokens=4):
    """Aligned facts whose gold objects are the backend's own greedy answers.

    Every probe in a language is then correct, except in ``wrong_languages``
    where the gold object is a string the model never produces.
    """
    from xlingual.probing import normalize_answer

    rng = np.random.default_rng(seed)
    index = 0
    for rel in relations:
        rows = {lang: [] for lang in languages}
        while len(rows[languages[0]]) < per_relation:
            subject = "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz"), 6))
            answers = {}
            for lang in languages:
                prompt = SYNTH_TEMPLATES[(lang, rel)][1].replace("<subject>", subject)
                answers[lang] = backend.greedy_generate(prompt, max_tokens).text
            if all(normalize_answer(a) for a in answers.values()):
                index += 1
                for lang in languages:
                    obj = f"never-generated-{index}" if lang in wrong_languages else answers[lang]
                    rows[lang].append((subject, obj, index))
        for lang in languages:
            write_relation(root, lang, rel, SYNTH_TEMPLATES[(lang, rel)], rows[lang])
    from xlingual.klar import load_dataset

    return load_dataset(root)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with property-suite sub-checks underneath."""
    seen = {}
    for outcome in ("failed", "passed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or rep.nodeid in seen:
                continue
            seen[rep.nodeid] = (props["criterion"], outcome, props.get("details") or [], rep)
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, details, rep in sorted(seen.values(), key=lambda x: x[0]):
        label = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        terminalreporter.write_line(f"[{label}] criterion {name}")
        for line in details:
            terminalreporter.write_line(f"         {line}")
        if outcome == "skipped" and isinstance(rep.longrepr, tuple):
            terminalreporter.write_line(f"         {rep.longrepr[2]}")
        elif outcome == "failed" and not details:
            terminalreporter.write_line(f"         {str(rep.longrepr).splitlines()[-1][:300]}")
