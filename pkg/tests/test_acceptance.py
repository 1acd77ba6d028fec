"""Acceptance gate.

Each test is one criterion; ``pytest_terminal_summary`` in conftest prints a
PASS/FAIL/SKIP line per criterion (and per sub-check of the property suite).

The two model-scale criteria need external resources:

* ``KLAR_ROOT``: directory with the released dataset (``<lang>/<relation>.json``)
* ``XLINGUAL_BLOOM_PATH`` / ``XLINGUAL_LLAMA2_PATH``: local checkpoints
  (otherwise the hub ids are tried)
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from xlingual.backends import (BLOOM_LANGUAGES, LLAMA2_LANGUAGES, ActivationCache, ByteTokenizer,
                               SyntheticLinearBackend, ToyMLPBackend, finite_difference_jacobian,
                               load_backend)
from xlingual.cli import main
from xlingual.consistency import consistency_matrix, overlap_consistency, relation_average_consistency
from xlingual.klar import FactTriple, RelationSpec, load_dataset
from xlingual.lens import (average_trajectories, dataset_rank_trajectories, phase_boundaries,
                           similarity_curves)
from xlingual.probing import judge_answer, probe_fact, run_probe
from xlingual.shortcut import ShortcutConfig, apply_shortcut, evaluate_shortcut, fit_shortcut, reference_config

from conftest import ScriptedBackend, make_records, random_prompts, self_consistent_root

pytestmark = pytest.mark.acceptance

BLOOM_TABLE8 = {"ar": 31.58, "ca": 41.50, "en": 46.81, "es": 43.56, "fr": 46.88, "vi": 56.82, "zh": 35.54}


def _resources(model_name, probe_model_without_data=True):
    root = os.environ.get("KLAR_ROOT")
    missing = []
    if not root or not Path(root).is_dir():
        missing.append("KLAR_ROOT is not set to the released dataset")
    backend = None
    if probe_model_without_data or not missing:
        try:
            backend = load_backend(model_name)
        except Exception as e:  # offline, gated or absent checkpoint
            missing.append(f"cannot load {model_name}: {type(e).__name__}: {str(e)[:200]}")
    return root, backend, missing


def _reproduction(root, backend, model, languages):
    """Probe, fit and evaluate reference shortcuts, rank trajectories, similarity."""
    ds = load_dataset(root, languages)
    langs = sorted(languages)
    cache = ActivationCache()
    records = {l: run_probe(ds, backend, l) for l in langs}
    shortcuts = {l: fit_shortcut(backend, ds, l, reference_config(model, l), records[l]) for l in langs}
    ev = evaluate_shortcut(backend, ds, shortcuts, langs, original_records=records)
    flat = [r for l in langs for r in records[l]]
    avg = average_trajectories(dataset_rank_trajectories(ds, backend, flat, "correct", cache=cache))
    phases = phase_boundaries(avg.mean["rank_target_correct"], avg.mean["rank_en_correct"])
    return ds, ev, phases, cache


def _report(lines, checks):
    failed = [name for name, ok in checks if not ok]
    for name, ok in checks:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
    assert not failed, "; ".join(failed)


def test_criterion_1_bloom_desk_reproduction(record_property):
    record_property("criterion", "1 BLOOM-560M desk-scale reproduction")
    root, backend, missing = _resources("bloom-560m")
    if missing:
        pytest.fail("unattainable in this environment: " + "; ".join(missing), pytrace=False)
    ds, ev, phases, cache = _reproduction(root, backend, "bloom", BLOOM_LANGUAGES)
    orig = {l: 100 * v for l, v in ev.original_accuracy.per_language.items()}
    short = {l: 100 * v for l, v in ev.shortcut_accuracy.per_language.items()}
    avg0, avg1 = np.mean(list(orig.values())), np.mean(list(short.values()))
    clc0 = 100 * relation_average_consistency(ev.original_records)
    clc1 = 100 * relation_average_consistency(ev.shortcut_records)

    N = backend.info.num_layers
    par = similarity_curves(ds, backend, ("en", "es"), "parallel", cache=cache)
    dis2 = similarity_curves(ds, backend, ("en", "es"), "dissection2", cache=cache)
    middle = np.arange(N // 4, 3 * N // 4 + 1)
    peak = int(middle[np.argmax(par.values[middle])])

    lines = []
    checks = [(f"average accuracy {avg0:.2f} within 3.0 of 43.24", abs(avg0 - 43.24) <= 3.0)]
    checks += [(f"{l} accuracy {orig[l]:.2f} within 5.0 of {ref}", abs(orig[l] - ref) <= 5.0)
               for l, ref in sorted(BLOOM_TABLE8.items())]
    checks += [
        (f"shortcut accuracy gain {avg1 - avg0:.2f} >= 5.0", avg1 - avg0 >= 5.0),
        (f"shortcut consistency gain {clc1 - clc0:.2f} >= 3.0", clc1 - clc0 >= 3.0),
        (f"extraction onset {phases.extraction_onset} at 15 +- 2",
         phases.extraction_onset is not None and abs(phases.extraction_onset - 15) <= 2),
        (f"divergence {phases.divergence} at 19 +- 2",
         phases.divergence is not None and abs(phases.divergence - 19) <= 2),
        (f"en-es parallel middle-layer peak {par.values[peak]:.3f} >= 0.6", par.values[peak] >= 0.6),
        (f"parallel {par.values[peak]:.3f} > dissection2 {dis2.values[peak]:.3f} at layer {peak}",
         par.values[peak] > dis2.values[peak]),
    ]
    record_property("details", lines)
    _report(lines, checks)


def test_criterion_2_llama2_reproduction(record_property):
    record_property("criterion", "2 LLaMA2-7B reproduction (only when hardware permits)")
    root, backend, missing = _resources("llama2-7b", probe_model_without_data=False)
    if missing:
        pytest.skip("not guaranteed at desk scale and unavailable here: " + "; ".join(missing))
    _, ev, phases, _ = _reproduction(root, backend, "llama2", LLAMA2_LANGUAGES)
    avg0 = 100 * ev.original_accuracy.average
    avg1 = 100 * ev.shortcut_accuracy.average
    lines = []
    record_property("details", lines)
    _report(lines, [
        (f"average accuracy {avg0:.2f} within 3.0 of 71.47", abs(avg0 - 71.47) <= 3.0),
        (f"shortcut accuracy {avg1:.2f} within 3.0 of 76.08", abs(avg1 - 76.08) <= 3.0),
        (f"divergence {phases.divergence} at 28 +- 2",
         phases.divergence is not None and abs(phases.divergence - 28) <= 2),
    ])


# criterion 3: property suite on synthetic backends

def check_jacobian():
    worst = 0.0
    for seed in range(3):
        b = ToyMLPBackend(num_layers=3, hidden_size=32, seed=100 + seed)
        for p in random_prompts(3, seed=seed):
            ids = b.encode(p)
            for n in range(3):
                J, h_n, _ = b.jacobian_at(p, n)
                F = finite_difference_jacobian(lambda v: b.run_from(ids, n, v), h_n, 1e-3)
                worst = max(worst, np.linalg.norm(J - F) / np.linalg.norm(F))
    return worst < 1e-2, f"Jacobian vs central differences: worst relative Frobenius error {worst:.2e} < 1e-2"


def check_linear_oracle(tmp):
    b = SyntheticLinearBackend.random(num_layers=3, seed=21)
    ds = self_consistent_root(tmp, b, per_relation=6)
    records = run_probe(ds, b, "en", 4)
    sc = fit_shortcut(b, ds, "en", ShortcutConfig(1, 1.0, 5, "en"), records)
    A, c = b.affine_map(1)
    err = max(np.max(np.abs(sc.W - A)), np.max(np.abs(sc.b - c)))
    prompts = random_prompts(100, seed=22)
    same = sum(apply_shortcut(b, sc, p, 8) == b.greedy_generate(p, 8) for p in prompts)
    return err < 1e-5 and same == 100, (f"linear oracle: max entry error {err:.1e} < 1e-5; "
                                        f"shortcut == full decoding on {same}/100 prompts")


def check_identity(tmp):
    b = ToyMLPBackend(seed=31)
    ds = self_consistent_root(tmp, b, relations=("capital",), per_relation=3)
    sc = fit_shortcut(b, ds, "en", ShortcutConfig(b.info.num_layers, 1.0, 3, "en"), max_tokens=4)
    prompts = random_prompts(30, seed=32)
    same = sum(apply_shortcut(b, sc, p, 10) == b.greedy_generate(p, 10) for p in prompts)
    return same == 30, f"identity degeneracy (n=N, beta=1): token-for-token on {same}/30 prompts"


def check_consistency():
    rng = np.random.default_rng(41)
    ok = True
    for _ in range(300):
        a = set(rng.choice(40, rng.integers(0, 20), replace=False).tolist())
        b = set(rng.choice(40, rng.integers(0, 20), replace=False).tolist())
        v = overlap_consistency(a, b)
        ok &= v == overlap_consistency(b, a) and 0.0 <= v <= 1.0
        ok &= (not a) or overlap_consistency(a, a) == 1.0
    fixture = overlap_consistency({"a", "b", "c"}, {"b", "c", "d"})
    m = consistency_matrix({"en": make_records("en", {1, 2, 3}, [1, 2, 3, 4]),
                            "es": make_records("es", {2, 3, 4}, [1, 2, 3, 4])})
    ok &= fixture == 0.5 and m["en", "es"] == 0.5 and m["en", "en"] == 1.0
    return ok, f"consistency: symmetric, bounded, self = 1.0, 2/4 fixture = {fixture}"


def check_lens_final_layer():
    total = agree = 0
    for b in (ToyMLPBackend(seed=51), SyntheticLinearBackend.random(seed=52)):
        for p in random_prompts(50, seed=53):
            lens_top = int(np.argmax(b.lens_project(b.capture_trace(p).states[-1])))
            greedy = int(np.argmax(b.next_token_logits(b.encode(p))))
            total += 1
            agree += lens_top == greedy
    return agree == total, f"lens rank-0 token at layer N == greedy next token on {agree}/{total} prompts"


def check_vinson_massif():
    rel = RelationSpec("continent", "P30", ("<subject>位于哪个大陆？答案是：",))
    fact = FactTriple("文森山", "南极洲", 1, "zh", rel)
    backend = ScriptedBackend({"文森山位于哪个大陆？答案是：": "南美洲"})
    rec = probe_fact(backend, fact, template_index=0)
    tok = ByteTokenizer()
    first_agrees = tok.encode("南美洲")[:3] == tok.encode("南极洲")[:3]
    ok = first_agrees and not rec.correct and not judge_answer("南美洲", "南极洲")[0]
    return ok, "judge_answer: 南美洲 vs gold 南极洲 incorrect despite shared first token"


def test_criterion_3_property_suite(record_property, tmp_path):
    record_property("criterion", "3 property suite on synthetic backends (< 2 min)")
    start = time.perf_counter()
    results = [check_jacobian(), check_linear_oracle(tmp_path / "lin"), check_identity(tmp_path / "id"),
               check_consistency(), check_lens_final_layer(), check_vinson_massif()]
    elapsed = time.perf_counter() - start
    checks = [(msg, ok) for ok, msg in results] + [(f"runtime {elapsed:.1f}s < 120s", elapsed < 120)]
    lines = []
    record_property("details", lines)
    _report(lines, checks)


# criterion 4: determinism

def _pipeline(data_root, out, cache, oracle):
    base = ["--model", "synthetic-linear", "--dataset-root", str(data_root), "--out-dir", str(out),
            "--cache-dir", str(cache), "--seed", "7", "--max-tokens", "4"]
    recs = ["--from", str(out / "probe.jsonl")]
    steps = [
        ["probe"],
        ["consistency", *recs],
        ["analyze", "ranks", *recs],
        ["analyze", "failures", *recs],
        ["analyze", "similarity"],
        ["analyze", "dissection"],
        ["analyze", "composition", "--oracle", f"dictionary:{oracle}", "--k", "5"],
        ["shortcut", "fit", "--languages", "en", "--layer", "1", "--m", "3", *recs],
        ["shortcut", "eval", "--languages", "en", "--shortcut-dir", str(out / "shortcuts"), *recs],
        ["shortcut", "grid", "--languages", "en", "--layers", "1:2", "--betas", "0.5,1", "--m-options", "2,3",
         *recs],
        ["baseline", "trans-en"],
        ["baseline", "early-exit", "--layer", "2"],
        ["report", *recs, "--baseline-from", str(out / "baseline_trans-en.csv"),
         "--baseline-from", str(out / "baseline_early-exit.csv")],
    ]
    for step in steps:
        assert main([*step, *base]) == 0, step
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_criterion_4_determinism(record_property, tmp_path):
    record_property("criterion", "4 identical seeds and warm caches give byte-identical CSV reports")
    data_root = tmp_path / "klar"
    self_consistent_root(data_root, load_backend("synthetic-linear"), ("en", "es"), per_relation=6,
                         wrong_languages=("es",))
    oracle = tmp_path / "oracle.json"
    oracle.write_text('{"a": "en", "e": "en", "o": "es"}')
    cache = tmp_path / "cache"
    _pipeline(data_root, tmp_path / "warmup", cache, oracle)
    first = _pipeline(data_root, tmp_path / "run1", cache, oracle)
    second = _pipeline(data_root, tmp_path / "run2", cache, oracle)
    differing = sorted(str(k) for k in first if first[k] != second.get(k))
    lines = []
    record_property("details", lines)
    _report(lines, [(f"{len(first)} CSV files compared, {len(differing)} differ {differing}",
                     len(first) >= 15 and not differing and first.keys() == second.keys())])
