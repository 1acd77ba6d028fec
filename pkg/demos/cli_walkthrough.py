"""
End-to-end run through the command line interface
==================================================

Every subcommand runs here against the built-in synthetic backend on a toy
dataset; the same calls with ``--model bloom-560m`` and the released data
reproduce the full study.  Outputs land in a temporary ``runs`` directory.
"""
import json
import tempfile
from pathlib import Path

from xlingual.backends import load_backend
from xlingual.cli import main

work = Path(tempfile.mkdtemp())
model = load_backend("synthetic-linear")

# gold objects are the model's own English answers; Spanish is never right
en_t = ["Capital of <subject>?", "What is the capital of <subject>? The answer is:"]
es_t = ["¿Capital de <subject>?", "¿Cuál es la capital de <subject>? La respuesta es:"]
en, es = [], []
for i, subject in enumerate(["abcdef", "ghijkl", "mnopqr", "stuvwx", "yzabcd", "efghij"]):
    answer = model.greedy_generate(en_t[1].replace("<subject>", subject), 4).text
    en.append({"subject": subject, "object": answer or "?", "index": i + 1})
    es.append({"subject": subject, "object": f"nunca-{i}", "index": i + 1})
for lang, t, samples in (("en", en_t, en), ("es", es_t, es)):
    (work / "klar" / lang).mkdir(parents=True)
    (work / "klar" / lang / "capital.json").write_text(json.dumps(
        {"relation_name": "capital", "relation_id": "P36", "prompt_templates": t, "samples": samples},
        ensure_ascii=False), encoding="utf-8")

out = work / "runs"
base = ["--model", "synthetic-linear", "--dataset-root", str(work / "klar"), "--out-dir", str(out),
        "--cache-dir", str(work / "cache"), "--max-tokens", "4"]
recs = ["--from", str(out / "probe.jsonl")]
for step in (["probe"],
             ["consistency", *recs],
             ["analyze", "ranks", *recs],
             ["analyze", "similarity"],
             ["shortcut", "fit", "--languages", "en", "--layer", "1", "--m", "3", *recs],
             ["shortcut", "eval", "--languages", "en", "--shortcut-dir", str(out / "shortcuts"), *recs],
             ["baseline", "trans-en"],
             ["report", *recs, "--shortcut-from", str(out / "shortcut_probe.jsonl"),
              "--baseline-from", str(out / "baseline_trans-en.csv")]):
    status = main([*step, *base])
    print(f"xlingual {' '.join(step[:2])}: exit {status}")

print((out / "accuracy.csv").read_text())
print((out / "table.csv").read_text())
print("files:", sorted(p.name for p in out.iterdir()))
