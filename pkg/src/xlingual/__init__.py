"""Cross-lingual factual recall probing, logit-lens analysis and linear shortcuts."""
from .klar import (Dataset, DatasetError, FactTriple, RelationSpec, build_prompt, load_dataset,
                   parallel_pairs, save_dataset)
from .probing import AccuracyReport, ProbeRecord, accuracy, judge_answer, run_probe
from .consistency import ConsistencyMatrix, consistency_matrix, overlap_consistency
from .shortcut import (LinearShortcut, ShortcutConfig, apply_shortcut, evaluate_shortcut, fit_shortcut,
                       grid_search)

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport", "ConsistencyMatrix", "Dataset", "DatasetError", "FactTriple", "LinearShortcut",
    "ProbeRecord", "RelationSpec", "ShortcutConfig", "accuracy", "apply_shortcut", "build_prompt",
    "consistency_matrix", "evaluate_shortcut", "fit_shortcut", "grid_search", "judge_answer",
    "load_dataset", "overlap_consistency", "parallel_pairs", "run_probe", "save_dataset",
]
