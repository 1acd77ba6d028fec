"""
Translation baselines with a dictionary translator
===================================================

Queries are translated to English, answered there and translated back; the
early-exit variant translates the top logit-lens token of an intermediate
layer.  A file-backed cache makes the second pass free of external calls.
"""
import json
import tempfile
from pathlib import Path

from xlingual.backends import SyntheticLinearBackend
from xlingual.baselines import CachedTranslator, DictionaryTranslator, early_exit_baseline, translation_en_baseline
from xlingual.klar import load_dataset

root = Path(tempfile.mkdtemp())
templates = {"en": "What is the capital of <subject>? The answer is:",
             "es": "¿Cuál es la capital de <subject>? La respuesta es:"}
rows = {"en": [("Canada", "Ottawa"), ("Spain", "Madrid")], "es": [("Canadá", "Ottawa"), ("España", "Madrid")]}
for lang in templates:
    (root / lang).mkdir()
    (root / lang / "capital.json").write_text(json.dumps({
        "relation_name": "capital", "relation_id": "P36", "prompt_templates": [templates[lang]] * 2,
        "samples": [{"subject": s, "object": o, "index": i + 1} for i, (s, o) in enumerate(rows[lang])],
    }, ensure_ascii=False), encoding="utf-8")
ds = load_dataset(root)
model = SyntheticLinearBackend.random(seed=1)

# whatever the random model says in English, the dictionary maps it back
answers = {f: model.greedy_generate(templates["en"].replace("<subject>", f), 16).text.strip()
           for f in ("Canada", "Spain")}
print("English answers:", answers)
table = {(templates["es"].replace("<subject>", es), "en"): templates["en"].replace("<subject>", en)
         for es, en in [("Canadá", "Canada"), ("España", "Spain")]}
table[(answers["Canada"], "es")] = "Ottawa"  # pretend the translation happens to be right
table[(answers["Spain"], "es")] = "Sevilla"
translator = DictionaryTranslator(table)

cache = CachedTranslator(translator, root / "translations.json")
res = translation_en_baseline(ds, model, cache, "es")
print(f"trans-en: {res.correct}/{res.evaluated} correct, {cache.external_calls} external calls")
again = CachedTranslator(translator, root / "translations.json")
translation_en_baseline(ds, model, again, "es")
print("second pass external calls:", again.external_calls)

# early exit: the lens token at layer 2 goes through the same kind of client
lens_tokens = {}
for f in ds.facts_for("es"):
    h = model.layer_states(model.encode(templates["es"].replace("<subject>", f.subject)), upto=2)[2]
    lens_tokens[f.subject] = model.decode([int(model.readout(h).argmax())]).strip()
print("lens tokens at layer 2:", lens_tokens)
exit_table = DictionaryTranslator({(t, "es"): "Madrid" for t in lens_tokens.values()})
res = early_exit_baseline(ds, model, exit_table, "es", layer=2)
print(f"trans-exit: {res.correct}/{res.evaluated} correct, skipped {res.skipped}")
