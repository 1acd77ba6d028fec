"""
A linear shortcut from layer n to the last layer
=================================================

On a model whose blocks are affine maps the mean Jacobian and bias recover
the true n -> N map exactly, and decoding through the shortcut matches full
decoding.  The beta multiplier rescales the linear part only.
"""
import numpy as np

from xlingual.backends import SyntheticLinearBackend
from xlingual.klar import FactTriple, RelationSpec
from xlingual.probing import ProbeRecord, judge_answer
from xlingual.shortcut import ShortcutConfig, apply_shortcut, fit_shortcut

model = SyntheticLinearBackend.random(num_layers=4, seed=0)
n = 2
A, c = model.affine_map(n)
print("true map from layer", n, ": A", A.shape, " c", c.shape)

# training facts: prompts answered by the model itself, so all count as correct
rel = RelationSpec("capital", "P36", ("<subject>", "What is the capital of <subject>? The answer is:"))
records = []
for i, subject in enumerate(["Canada", "Chile", "Kenya", "Peru", "Fiji", "Laos"]):
    prompt = f"What is the capital of {subject}? The answer is:"
    gen = model.greedy_generate(prompt, 4)
    fact = FactTriple(subject, gen.text or "?", i + 1, "en", rel)
    ok, span = judge_answer(gen.text, fact.object) if gen.text.strip() else (False, None)
    records.append(ProbeRecord(fact, prompt, gen, ok, span))
print("correct training candidates:", sum(r.correct for r in records))

sc = fit_shortcut(model, None, "en", ShortcutConfig(n, 1.0, 4, "en"), records)
print("max |W_r - A| =", np.abs(sc.jacobian_mean - A).max())
print("max |b_r - c| =", np.abs(sc.b - c).max())
print("trained on:", sc.provenance)

for prompt in ["hello there", "What is the capital of Chile? The answer is:"]:
    full = model.greedy_generate(prompt, 6)
    short = apply_shortcut(model, sc, prompt, 6)
    print(f"  {prompt!r}: full={full.text!r} shortcut={short.text!r} same={full == short}")

# beta rescales W and leaves b alone
for beta in (0.0, 0.5, 1.0, 2.0):
    s = sc.with_beta(beta)
    print(f"  beta={beta}: output {apply_shortcut(model, s, 'hello there', 6).text!r}")
