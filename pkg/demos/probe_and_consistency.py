"""
Probing parallel facts and measuring cross-lingual consistency
===============================================================

A two-language toy dataset is written to a temporary directory, probed with
a scripted "model", and scored with full-answer matching and the overlap
ratio of correctly answered facts.
"""
import json
import tempfile
from pathlib import Path

from xlingual import accuracy, consistency_matrix, judge_answer, load_dataset, run_probe
from xlingual.backends.base import Backend, GenerationResult, ModelInfo
from xlingual.backends.synthetic import ByteTokenizer

root = Path(tempfile.mkdtemp())
facts = {
    "en": ("What is the capital of <subject>? The answer is:",
           [("Canada", "Ottawa"), ("Germany", "Berlin"), ("Spain", "Madrid"), ("Japan", "Tokyo")]),
    "es": ("¿Cuál es la capital de <subject>? La respuesta es:",
           [("Canadá", "Ottawa"), ("Alemania", "Berlín"), ("España", "Madrid"), ("Japón", "Tokio")]),
}
for lang, (template, rows) in facts.items():
    (root / lang).mkdir()
    payload = {"relation_name": "capital", "relation_id": "P36", "prompt_templates": [template, template],
               "samples": [{"subject": s, "object": o, "index": i + 1} for i, (s, o) in enumerate(rows)]}
    (root / lang / "capital.json").write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

ds = load_dataset(root)
print("languages:", sorted(ds.languages), "facts:", len(ds.facts))


# a stand-in model that answers from a lookup table
class LookupModel(Backend):
    def __init__(self, answers):
        self.answers, self.tokenizer, self.eos_token_id = answers, ByteTokenizer(), None
        self.info = ModelInfo("lookup", 1, 1, 257)

    def encode(self, text): return self.tokenizer.encode(text)
    def decode(self, ids): return self.tokenizer.decode(ids)
    def layer_states(self, ids, upto=None): raise NotImplementedError
    def run_from(self, ids, n, h): raise NotImplementedError
    def readout(self, s): raise NotImplementedError

    def greedy_generate(self, prompt, max_tokens=16):
        text = self.answers.get(prompt, " I do not know")
        return GenerationResult(text, tuple(self.encode(text)), "newline")


model = LookupModel({
    "What is the capital of Canada? The answer is:": " Ottawa, of course.",
    "What is the capital of Germany? The answer is:": " Berlin",
    "What is the capital of Spain? The answer is:": " Madrid",
    "¿Cuál es la capital de Alemania? La respuesta es:": " Berlín",
    "¿Cuál es la capital de España? La respuesta es:": " Barcelona",
    "¿Cuál es la capital de Japón? La respuesta es:": " Tokio",
})

records = run_probe(ds, model, "en") + run_probe(ds, model, "es")
for r in records:
    print(f"  {r.language} {r.fact.subject:9s} -> {r.generation.text!r:22s} correct={r.correct}")

report = accuracy(records)
print("accuracy per language:", report.per_language, "average:", round(report.average, 3))

# the full answer decides, so a shared first character is not enough
print("南美洲 vs 南极洲:", judge_answer("南美洲", "南极洲"))

m = consistency_matrix(records)
print("consistency en-es (Jaccard):", m["en", "es"])
print(m.to_csv())
