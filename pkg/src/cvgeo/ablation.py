"""Ablation grids: component toggles, aggregation heads and the lambda sweep.

Each row trains a fresh model from the base configuration with a few keys
overridden, evaluates street -> satellite retrieval on the test split and
lands in a tab-separated table plus a bar chart.
"""
from __future__ import annotations

import csv
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import RunConfig, toy_config
from .data import Source, View, scan_dataset
from .evaluate import evaluate_model, query_gallery_records
from .grem import build_extractor, run_grem, scan_pool, write_assignments
from .train import Trainer

logger = logging.getLogger(__name__)

_OFF = {"loss.lam": 0.0, "bridge3d.enabled": False, "data.grem": False}

SUITES: dict[str, list[tuple[str, dict]]] = {
    "components": [
        ("PAFA", dict(_OFF)),
        ("PAFA+SSL", {**_OFF, "loss.lam": None}),
        ("PAFA+MSBM", {**_OFF, "bridge3d.enabled": True}),
        ("PAFA+SSL+MSBM", {**_OFF, "loss.lam": None, "bridge3d.enabled": True}),
        ("PAFA+SSL+MSBM+GREM", {"loss.lam": None, "bridge3d.enabled": True, "data.grem": True}),
    ],
    "heads": [(h, {"aggregation.head": h, "data.grem": False})
              for h in ("netvlad", "gem", "conv_ap", "pafa")],
    "lambda": [(f"{lam:.1f}", {"loss.lam": lam, "data.grem": False})
               for lam in (1.0, 2.0, 3.0, 4.0, 5.0)],
}

COLUMNS = ["suite", "row", "status", "R@1", "R@5", "R@10", "AP", "seconds", "error"]


@dataclass
class AblationRow:
    suite: str
    name: str
    overrides: dict
    status: str = "pending"
    recall_at: dict = field(default_factory=dict)
    ap: Optional[float] = None
    seconds: float = 0.0
    error: str = ""

    def cells(self) -> list:
        r = self.recall_at
        fmt = lambda v: "" if v is None else f"{v:.2f}"
        return [self.suite, self.name, self.status, fmt(r.get(1)), fmt(r.get(5)), fmt(r.get(10)),
                fmt(self.ap), f"{self.seconds:.1f}", self.error]


def variants(suite: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Configurations of a suite; ``None`` overrides keep the base value."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    out = []
    for name, overrides in SUITES[suite]:
        keep = {k: v for k, v in overrides.items() if v is not None}
        out.append((name, base.replace(**keep)))
    return out


def grem_records(config: RunConfig, train_records, data_root, out_dir) -> list:
    """GREM additions: from ``data.grem_manifest`` when set, else computed from ``train/google``."""
    from .data import read_manifest

    if config.data.grem_manifest and Path(config.data.grem_manifest).exists():
        return [r for r in read_manifest(config.data.grem_manifest) if r.source is Source.GREM]
    pool_dir = Path(data_root) / "train" / "google"
    if not pool_dir.is_dir():
        raise FileNotFoundError(f"GREM enabled but no candidate pool at {pool_dir}")
    extractor = build_extractor(config.data.grem_extractor, config.data.grem_weights)
    assignments, records = run_grem(train_records, scan_pool(pool_dir), extractor,
                                    config.data.grem_scope)
    manifest = Path(out_dir) / "grem_manifest.jsonl"
    write_assignments(assignments, records, manifest, append=False)
    return records


def run_row(row: AblationRow, config: RunConfig, data_root, out_dir, cache: dict) -> AblationRow:
    start = time.perf_counter()
    try:
        records = cache.setdefault("train", scan_dataset(data_root, "train", config.data.invert_altitude))
        records = [r for r in records if r.view is not View.STREET or r.source is Source.ORIGINAL]
        if config.data.grem:
            if "grem" not in cache:
                cache["grem"] = grem_records(config, records, data_root, out_dir)
            records = records + cache["grem"]
        if "eval" not in cache:
            cache["eval"] = query_gallery_records(data_root)
        trainer = Trainer(config, records)
        trainer.fit()
        queries, gallery = cache["eval"]
        report, _ = evaluate_model(trainer.model, queries, gallery, config.backbone.input_size,
                                   config.backbone.backend)
        row.status, row.recall_at, row.ap = "ok", report.recall_at, report.ap
    except Exception as exc:  # a failed row is reported, the grid goes on
        logger.error("ablation row %s/%s failed:\n%s", row.suite, row.name, traceback.format_exc())
        row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
    row.seconds = time.perf_counter() - start
    return row


def write_table(rows: list[AblationRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(row.cells())
    return path


def run_ablation(suite: str, data_root, out_dir, base: Optional[RunConfig] = None,
                 full: bool = False, plot: bool = True) -> list[AblationRow]:
    """Train and evaluate every row of ``suite``; writes ``ablation_<suite>.tsv`` (and ``.png``).

    Without ``full`` the desk-scale toy configuration is the base. ``full``
    requires an explicit base configuration pointing at foundation weights.
    """
    if full:
        if base is None or base.backbone.backend == "toy" or not base.backbone.weights_path:
            raise ValueError("--full needs a config with a foundation backend and backbone.weights_path")
    base = base or toy_config()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, cache = [], {}
    for name, config in variants(suite, base):
        row = AblationRow(suite, name, dict(SUITES[suite][len(rows)][1]))
        logger.info("ablation %s: training row %s", suite, name)
        rows.append(run_row(row, config, data_root, out_dir, cache))
    write_table(rows, out_dir / f"ablation_{suite}.tsv")
    if plot:
        from .plotting import plot_ablation

        plot_ablation(rows, out_dir / f"ablation_{suite}.png")
    return rows
