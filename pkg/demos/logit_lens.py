"""
Reading intermediate layers with the logit lens
================================================

A small random residual MLP stands in for a language model.  Each layer's
final-token state is projected through the final norm and unembedding, and
the rank of chosen tokens is tracked across depth.
"""
import numpy as np

from xlingual.backends import ToyMLPBackend
from xlingual.lens import (DictionaryOracle, composition_from_tokens, cosine_per_layer, phase_boundaries,
                           rank_trajectories, top_k_ids)

model = ToyMLPBackend(num_layers=6, hidden_size=48, seed=3)
prompt = "What is the capital of Canada? The answer is:"
trace = model.capture_trace(prompt, with_logits=True)
print("states:", trace.states.shape, " lens logits:", trace.lens_logits.shape)

# the greedy answer's first token has rank 0 at the last layer by construction
answer = model.greedy_generate(prompt, 3)
print("greedy answer:", repr(answer.text), answer.token_ids)
tr = rank_trajectories(model, trace, int(answer.token_ids[0]), ord("O"))
print("rank of greedy token per layer:", tr.rank_target_correct)
print("rank of 'O' per layer:        ", tr.rank_en_correct)

# top tokens per layer
for layer, ids in enumerate(top_k_ids(trace.lens_logits, 5)):
    print(f"  layer {layer}: {[model.decode([int(t)]) for t in ids]}")

# similarity of the same prompt in two surface forms
other = model.capture_trace("WHAT IS THE CAPITAL OF CANADA? THE ANSWER IS:")
print("cosine per layer:", np.round(cosine_per_layer(trace.states, other.states), 3))

# language composition from decoded tokens with a tiny dictionary oracle
oracle = DictionaryOracle({"the": "en", "la": "fr", "是": "zh"})
comp = composition_from_tokens([[["the", "la", "是"], ["the", "the", "la"]]], oracle, k=3)
print("composition per layer:", comp.layers)

# phase boundaries on idealized curves
target = [90, 90, 88, 40, 35, 20, 8, 2]
english = [80, 60, 10, 3, 3, 12, 30, 70]
print(phase_boundaries(target, english))
