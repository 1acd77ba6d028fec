"""Run manifests and plot-ready CSV tables."""
from __future__ import annotations

import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from .io import atomic_write_json, atomic_write_text
from .probing import AccuracyReport

TABLE_METHODS = ("original", "shortcut", "trans-en", "trans-exit", "ft")


@dataclass
class RunManifest:
    command_line: list[str]
    model_fingerprint: str | None = None
    dataset_hash: str | None = None
    template_index: int | None = None
    seed: int | None = None
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: str | None = None
    outputs: list[str] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def write_artifact(self, path: str | Path, text: str):
        atomic_write_text(path, text)
        self.outputs.append(str(path))

    def write_json_artifact(self, path: str | Path, obj):
        atomic_write_json(path, obj)
        self.outputs.append(str(path))

    def record(self, path: str | Path):
        self.outputs.append(str(path))

    def finish(self, path: str | Path):
        self.finished_at = datetime.now(timezone.utc).isoformat()
        atomic_write_json(path, asdict(self))


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100 * x:.2f}"


def accuracy_csv(report: AccuracyReport) -> str:
    """Long table: one row per language, then one per (language, relation)."""
    rows = [[lang, "ALL", report.counts[lang], _pct(v)] for lang, v in report.per_language.items()]
    rows += [[lang, rel, report.relation_counts[(lang, rel)], _pct(v)]
             for (lang, rel), v in report.per_relation.items()]
    if report.per_language:
        rows.append(["AVG", "ALL", sum(report.counts.values()), _pct(report.average)])
    return _csv(rows, ["language", "relation", "n", "accuracy"])


def method_table_csv(per_method: Mapping[str, Mapping[str, float]],
                     languages: Sequence[str], methods: Sequence[str] = TABLE_METHODS) -> str:
    """Languages x methods accuracy table (percent); missing cells stay empty."""
    rows = [[lang, *(_pct(per_method.get(m, {}).get(lang)) for m in methods)] for lang in languages]
    return _csv(rows, ["language", *methods])


def relation_comparison_csv(acc_orig: Mapping[str, float], acc_short: Mapping[str, float],
                            clc_orig: Mapping[str, float], clc_short: Mapping[str, float]) -> str:
    rels = sorted(set(acc_orig) | set(clc_orig))
    rows = []
    for rel in rels:
        a0, a1 = acc_orig.get(rel), acc_short.get(rel)
        c0, c1 = clc_orig.get(rel), clc_short.get(rel)
        rows.append([rel, _pct(a0), _pct(a1), _pct(a1 - a0) if None not in (a0, a1) else "",
                     _pct(c0), _pct(c1), _pct(c1 - c0) if None not in (c0, c1) else ""])
    mean = lambda d: sum(d.values()) / len(d) if d else None
    a0, a1, c0, c1 = mean(acc_orig), mean(acc_short), mean(clc_orig), mean(clc_short)
    rows.append(["AVG", _pct(a0), _pct(a1), _pct(a1 - a0) if None not in (a0, a1) else "",
                 _pct(c0), _pct(c1), _pct(c1 - c0) if None not in (c0, c1) else ""])
    return _csv(rows, ["relation", "acc_original", "acc_shortcut", "acc_diff",
                       "clc_original", "clc_shortcut", "clc_diff"])


def grid_csv(table: Sequence[tuple[int, float, int, float]]) -> str:
    return _csv([[n, f"{b:.2f}", m, f"{acc:.6f}"] for n, b, m, acc in table], ["n", "beta", "m", "accuracy"])


def log_error(err: BaseException, command: str):
    print(json.dumps({"level": "error", "command": command, "type": type(err).__name__,
                      "message": str(err)}, ensure_ascii=False), file=sys.stderr)
