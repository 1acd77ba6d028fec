"""Command-line entry point: ``xlingual <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import baselines, lens
from .backends import ActivationCache, load_backend
from .consistency import DENOMINATORS, consistency_matrix, relation_consistency
from .klar import DEFAULT_TEMPLATE_INDEX, PIVOT_LANGUAGE, load_dataset
from .probing import DEFAULT_MAX_TOKENS, accuracy, load_records, run_probe, save_records
from .reporting import (RunManifest, accuracy_csv, grid_csv, log_error, method_table_csv,
                        relation_comparison_csv)
from .shortcut import (BETA_GRID, BLOOM_CONFIG, LAYER_RANGES, LLAMA2_CONFIG, M_OPTIONS, LinearShortcut,
                       ShortcutConfig, apply_shortcut, evaluate_shortcut, fit_shortcut, grid_search)

logger = logging.getLogger("xlingual")

REFERENCE_CONFIGS = {"bloom": BLOOM_CONFIG, "llama2": LLAMA2_CONFIG}


def _csv_list(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def _int_range(s: str) -> list[int]:
    if ":" in s:
        a, b = s.split(":")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in _csv_list(s)]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", default="bloom-560m")
    p.add_argument("--dataset-root", type=Path)
    p.add_argument("--languages", type=_csv_list)
    p.add_argument("--relations", type=_csv_list)
    p.add_argument("--template-index", type=int, default=DEFAULT_TEMPLATE_INDEX)
    p.add_argument("--max-tokens", type=int, default=DEFAULT_MAX_TOKENS)
    p.add_argument("--layer", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--from", dest="from_path", type=Path, help="probe records (JSON lines)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="xlingual", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("probe", parents=[common], help="probe facts and judge full answers")

    p = sub.add_parser("consistency", parents=[common], help="pairwise cross-lingual consistency")
    p.add_argument("--denominator", choices=DENOMINATORS, default="union")

    p = sub.add_parser("analyze", help="layer-wise logit-lens analyses")
    asub = p.add_subparsers(dest="analysis", required=True)
    asub.add_parser("ranks", parents=[common])
    asub.add_parser("failures", parents=[common])
    a = asub.add_parser("similarity", parents=[common])
    a.add_argument("--all-pairs", action="store_true")
    asub.add_parser("dissection", parents=[common])
    a = asub.add_parser("composition", parents=[common])
    a.add_argument("--oracle", default="langid", help="langid | dictionary:<json> | fasttext:<model>")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("shortcut", help="fit / tune / apply / evaluate the linear shortcut")
    ssub = p.add_subparsers(dest="action", required=True)
    ssub.add_parser("fit", parents=[common])
    s = ssub.add_parser("grid", parents=[common])
    s.add_argument("--layers", type=_int_range)
    s.add_argument("--betas", type=lambda v: [float(x) for x in _csv_list(v)])
    s.add_argument("--m-options", type=lambda v: [int(x) for x in _csv_list(v)])
    s.add_argument("--max-tuning-facts", type=int)
    s = ssub.add_parser("apply", parents=[common])
    s.add_argument("--prompt", required=True)
    s.add_argument("--language", required=True)
    s.add_argument("--shortcut-dir", type=Path)
    s = ssub.add_parser("eval", parents=[common])
    s.add_argument("--shortcut-dir", type=Path)
    for s in ssub.choices.values():
        s.add_argument("--mode", choices=("iterative", "first_token"), default="iterative")

    p = sub.add_parser("baseline", help="translation baselines")
    bsub = p.add_subparsers(dest="method", required=True)
    for name in ("trans-en", "early-exit"):
        b = bsub.add_parser(name, parents=[common])
        b.add_argument("--translator", default="identity",
                       help="identity | dictionary:<json> | cache:<json> (offline)")

    p = sub.add_parser("report", parents=[common], help="accuracy tables from saved records")
    p.add_argument("--shortcut-from", type=Path)
    p.add_argument("--baseline-from", type=Path, action="append", default=[])
    return parser


def _family(model: str) -> str | None:
    for fam in LAYER_RANGES:
        if model.startswith(fam) or f"/{fam}" in model.lower():
            return fam
    return None


class _Run:
    def __init__(self, args, argv):
        self.args = args
        self.out = args.out_dir
        self.manifest = RunManifest(list(argv), template_index=args.template_index, seed=args.seed)
        self._ds = self._backend = None
        self.cache = ActivationCache(args.cache_dir)

    @property
    def ds(self):
        if self._ds is None:
            if self.args.dataset_root is None:
                raise ValueError("--dataset-root is required for this command")
            ds = load_dataset(self.args.dataset_root, self.args.languages)
            if self.args.relations:
                ds = ds.subset(relations=self.args.relations)
            self._ds = ds
            self.manifest.dataset_hash = ds.content_hash()
        return self._ds

    @property
    def backend(self):
        if self._backend is None:
            self._backend = load_backend(self.args.model)
            self.manifest.model_fingerprint = self._backend.fingerprint()
        return self._backend

    @property
    def languages(self) -> list[str]:
        return self.args.languages or sorted(self.ds.languages)

    def records(self):
        if self.args.from_path:
            return load_records(self.args.from_path, self.ds if self.args.dataset_root else None,
                                self.args.languages)
        recs = []
        for lang in self.languages:
            recs += run_probe(self.ds, self.backend, lang, self.args.max_tokens, self.args.template_index,
                              self.args.relations)
        return recs

    def write(self, name: str, text: str):
        self.manifest.write_artifact(self.out / name, text)

    def write_json(self, name: str, obj):
        self.manifest.write_json_artifact(self.out / name, obj)

    def shortcut_config(self, lang: str) -> ShortcutConfig:
        """Flags override the per-language defaults of known model families."""
        a = self.args
        fam = _family(a.model)
        table = REFERENCE_CONFIGS.get(fam)
        n = a.layer if a.layer is not None else (table["n"] if table else self.backend.info.num_layers)
        beta = a.beta if a.beta is not None else (table["beta"].get(lang, 1.0) if table else 1.0)
        m = a.m if a.m is not None else (table["m"] if table else 25)
        return ShortcutConfig(n, beta, m, lang)


def cmd_probe(run: _Run):
    recs = run.records()
    path = run.out / "probe.jsonl"
    save_records(recs, path)
    run.manifest.record(path)
    run.write("accuracy.csv", accuracy_csv(accuracy(recs)))


def cmd_consistency(run: _Run):
    recs = run.records()
    m = consistency_matrix(recs, denominator=run.args.denominator)
    run.manifest.settings["denominator"] = run.args.denominator
    run.write("consistency.csv", m.to_csv())
    run.write("consistency_long.csv", m.to_long_csv())
    run.write("consistency.json", m.to_json())
    rel = relation_consistency(recs, denominator=run.args.denominator)
    rows = "".join(f"{k},{v:.6f}\n" for k, v in rel.items())
    run.write("relation_consistency.csv", "relation,value\n" + rows)


def cmd_analyze(run: _Run):
    a = run.args
    ds, be = run.ds, run.backend
    if a.analysis in ("ranks", "failures"):
        kind = "correct" if a.analysis == "ranks" else "wrong"
        trajs = lens.dataset_rank_trajectories(ds, be, run.records(), kind, a.template_index, run.cache)
        avg = lens.average_trajectories(trajs)
        run.write(f"{a.analysis}.csv", avg.to_long_csv())
        pb = lens.phase_boundaries(avg.mean["rank_target_correct"], avg.mean["rank_en_correct"])
        run.write_json(f"{a.analysis}_phases.json", {"extraction_onset": pb.extraction_onset,
                                                     "divergence": pb.divergence, "count": avg.count})
    elif a.analysis in ("similarity", "dissection"):
        langs = run.languages
        if a.analysis == "similarity" and a.all_pairs:
            pairs = [(x, y) for i, x in enumerate(langs) for y in langs[i + 1:]]
        else:
            pairs = [(PIVOT_LANGUAGE, x) for x in langs if x != PIVOT_LANGUAGE]
        conds = ("parallel",) if a.analysis == "similarity" else lens.CONDITIONS
        curves = [lens.similarity_curves(ds, be, p, c, a.template_index, a.seed, run.cache)
                  for p in pairs for c in conds]
        run.write(f"{a.analysis}.csv", lens.curves_to_long_csv(curves))
    elif a.analysis == "composition":
        oracle = _oracle(a.oracle)
        for lang in run.languages:
            comp = lens.language_composition(ds, be, lang, oracle, a.k, a.threshold, a.template_index, run.cache)
            run.write(f"composition_{lang}.csv", comp.to_long_csv())


def _oracle(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "langid":
        return lens.LangidOracle()
    if kind == "dictionary":
        return lens.DictionaryOracle(json.loads(Path(arg).read_text(encoding="utf-8")))
    if kind == "fasttext":
        return lens.FastTextOracle(arg)
    raise ValueError(f"unknown oracle {spec!r}")


def _translator(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "identity":
        return baselines.IdentityTranslator()
    if kind == "dictionary":
        return baselines.DictionaryTranslator.from_json(arg)
    if kind == "cache":
        return baselines.CachedTranslator(None, arg)
    raise ValueError(f"unknown translator {spec!r}")


def _load_shortcuts(run: _Run, directory: Path, langs):
    return {l: LinearShortcut.load(directory / l, run.backend) for l in langs}


def _fit_all(run: _Run, recs):
    out = {}
    for lang in run.languages:
        sc = fit_shortcut(run.backend, run.ds, lang, run.shortcut_config(lang),
                          [r for r in recs if r.language == lang], run.args.template_index, run.args.seed,
                          run.args.max_tokens)
        sc.save(run.out / "shortcuts" / lang)
        run.manifest.record(run.out / "shortcuts" / f"{lang}.npz")
        out[lang] = sc
    return out


def cmd_shortcut(run: _Run):
    a = run.args
    if a.action == "fit":
        _fit_all(run, run.records())
    elif a.action == "grid":
        fam = _family(a.model)
        layers = a.layers or (list(LAYER_RANGES[fam]) if fam else list(range(run.backend.info.num_layers)))
        recs = run.records()
        best = {}
        for lang in run.languages:
            res = grid_search(run.backend, run.ds, lang, layers, a.betas or BETA_GRID, a.m_options or M_OPTIONS,
                              [r for r in recs if r.language == lang], a.template_index, a.seed,
                              a.max_tokens, a.max_tuning_facts, a.mode)
            run.write(f"grid_{lang}.csv", grid_csv(res.table))
            best[lang] = {"n": res.best.layer_n, "beta": res.best.beta, "m": res.best.samples_per_relation_m,
                          "accuracy": res.best_accuracy, "tuning_size": res.tuning_size}
        run.write_json("grid_best.json", best)
    elif a.action == "apply":
        sc_dir = a.shortcut_dir or run.out / "shortcuts"
        sc = LinearShortcut.load(sc_dir / a.language, run.backend)
        gen = apply_shortcut(run.backend, sc, a.prompt, a.max_tokens, a.mode)
        result = {"prompt": a.prompt, "text": gen.text, "token_ids": list(gen.token_ids),
                  "stop_reason": gen.stop_reason}
        run.write_json("apply.json", result)
        print(json.dumps(result, ensure_ascii=False))
    elif a.action == "eval":
        recs = run.records()
        if a.shortcut_dir:
            shortcuts = _load_shortcuts(run, a.shortcut_dir, run.languages)
        else:
            shortcuts = _fit_all(run, recs)
        by_lang = {l: [r for r in recs if r.language == l] for l in run.languages}
        ev = evaluate_shortcut(run.backend, run.ds, shortcuts, run.languages, a.template_index,
                               a.max_tokens, by_lang, a.mode)
        save_records([r for l in run.languages for r in ev.shortcut_records[l]], run.out / "shortcut_probe.jsonl")
        run.manifest.record(run.out / "shortcut_probe.jsonl")
        table = {"original": ev.original_accuracy.per_language, "shortcut": ev.shortcut_accuracy.per_language}
        run.write("shortcut_table.csv", method_table_csv(table, run.languages))
        heldout = {"original": ev.original_heldout.per_language, "shortcut": ev.shortcut_heldout.per_language}
        run.write("shortcut_table_heldout.csv", method_table_csv(heldout, run.languages))
        c0, c1 = ev.relation_consistency()
        run.write("shortcut_relations.csv", relation_comparison_csv(
            ev.original_accuracy.relation_table(), ev.shortcut_accuracy.relation_table(), c0, c1))
        run.write("consistency_original.csv", ev.original_consistency.to_csv())
        run.write("consistency_shortcut.csv", ev.shortcut_consistency.to_csv())


def cmd_baseline(run: _Run):
    a = run.args
    translator = _translator(a.translator)
    rows = []
    for lang in run.languages:
        if a.method == "trans-en":
            res = baselines.translation_en_baseline(run.ds, run.backend, translator, lang, a.template_index,
                                                    a.max_tokens)
        else:
            fam = _family(a.model)
            layer = a.layer if a.layer is not None else baselines.EARLY_EXIT_LAYERS.get(
                fam, run.backend.info.num_layers)
            run.manifest.settings["early_exit_layer"] = layer
            res = baselines.early_exit_baseline(run.ds, run.backend, translator, lang, layer, a.template_index)
        rows.append(f"{lang},{res.evaluated},{res.skipped},{100 * res.accuracy:.2f}\n")
    run.write(f"baseline_{a.method}.csv", "language,evaluated,skipped,accuracy\n" + "".join(rows))


def cmd_report(run: _Run):
    recs = run.records()
    rep = accuracy(recs)
    run.write("accuracy.csv", accuracy_csv(rep))
    table = {"original": rep.per_language}
    if run.args.shortcut_from:
        table["shortcut"] = accuracy(load_records(run.args.shortcut_from)).per_language
    for path in run.args.baseline_from:
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        method = "trans-en" if "trans-en" in path.name else "trans-exit"
        table[method] = {r["language"]: float(r["accuracy"]) / 100 for r in rows}
    run.write("table.csv", method_table_csv(table, sorted(rep.per_language)))


COMMANDS = {"probe": cmd_probe, "consistency": cmd_consistency, "analyze": cmd_analyze,
            "shortcut": cmd_shortcut, "baseline": cmd_baseline, "report": cmd_report}


def _manifest_name(args) -> str:
    parts = [args.command] + [getattr(args, k) for k in ("analysis", "action", "method") if getattr(args, k, None)]
    return "-".join(parts)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args, argv)
    try:
        COMMANDS[args.command](run)
    except Exception as e:
        log_error(e, args.command)
        return 1
    run.manifest.finish(run.out / "manifests" / f"{_manifest_name(args)}.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
