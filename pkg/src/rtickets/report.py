"""Aggregation of run artifacts into CSV summaries.

Produces, under <run_dir>/report/:

* summary.csv        clean/aua/suc/queries per (method, sparsity), mean and
                     population std over seeds
* layer_sparsity.csv surviving-weight percentage per (ticket, layer, kind)
* curves.csv         per-epoch training metrics per stage
* ablation.csv       the initialization-vs-structure comparison rows

Artifacts from different configs never mix: hashes must agree unless forced.
"""

from __future__ import annotations

import csv
import json
import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from .pipeline import load_ticket

_TAG_RE = re.compile(r"^(?P<method>.+)_s(?P<sparsity>\d+\.\d+)$")


def split_tag(tag: str) -> tuple[str, float]:
    if tag == "finetune":
        return "finetune", 0.0
    m = _TAG_RE.match(tag)
    if not m:
        return tag, float("nan")
    return m.group("method"), float(m.group("sparsity"))


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def make_report(run_dir, force: bool = False) -> dict[str, Path]:
    root = Path(run_dir)
    seed_dirs = sorted(root.glob("seed_*"), key=lambda p: p.name)
    if not seed_dirs:
        raise ValueError(f"no seed_* directories under {root}; nothing to report")

    # --- attack summaries ---
    hashes: dict[str, list[str]] = defaultdict(list)
    by_tag: dict[str, list[dict]] = defaultdict(list)
    for sd in seed_dirs:
        for path in sorted(sd.glob("attack_*.json")):
            payload = json.loads(path.read_text())
            hashes[payload["config_hash"]].append(str(path))
            by_tag[payload["tag"]].append(payload)

    # --- metrics curves ---
    curve_rows: dict[tuple[str, int], list[dict]] = defaultdict(list)
    for sd in seed_dirs:
        for path in sorted((sd / "metrics").glob("*.jsonl")) if (sd / "metrics").exists() else []:
            for line in path.read_text().splitlines():
                rec = json.loads(line)
                hashes[rec["config_hash"]].append(str(path))
                curve_rows[(rec["stage"], rec["epoch"])].append(rec)

    if not by_tag and not curve_rows:
        raise ValueError(
            f"missing inputs under {root}: no attack_*.json and no metrics/*.jsonl files"
        )
    if len(hashes) > 1 and not force:
        listing = "; ".join(f"{h}: {files[0]}" for h, files in sorted(hashes.items()))
        raise ValueError(
            f"artifacts mix {len(hashes)} different config hashes ({listing}); "
            "rerun report with force to aggregate anyway"
        )

    report_dir = root / "report"
    report_dir.mkdir(exist_ok=True)
    written: dict[str, Path] = {}

    metrics = ("clean_acc", "aua", "suc", "avg_queries")
    rows = []
    for tag in sorted(by_tag):
        method, sparsity = split_tag(tag)
        payloads = sorted(by_tag[tag], key=lambda p: p["seed"])
        row = [method, sparsity, len(payloads)]
        for metric in metrics:
            mean, std = _mean_std([p["report"][metric] for p in payloads])
            row.extend([mean, std])
        rows.append(row)
    rows.sort(key=lambda r: (r[0], r[1]))
    if rows:
        header = ["method", "sparsity", "seeds"]
        for metric in metrics:
            header.extend([f"{metric}_mean", f"{metric}_std"])
        path = report_dir / "summary.csv"
        _write_csv(path, header, rows)
        written["summary"] = path

        ab_rows = [r for r in rows if r[0].startswith("ablate_") or r[0] == "robust"]
        path = report_dir / "ablation.csv"
        _write_csv(path, header, ab_rows)
        written["ablation"] = path

    # --- layer sparsity from tickets ---
    layer_acc: dict[tuple[str, str], list[float]] = defaultdict(list)
    for sd in seed_dirs:
        for tf in sorted((sd / "tickets").glob("*.ticket")) if (sd / "tickets").exists() else []:
            ticket = load_ticket(tf)
            for key, pruned in sorted(ticket.layer_sparsity.items()):
                layer_acc[(tf.stem, key)].append(100.0 * (1.0 - pruned))
    if layer_acc:
        rows = []
        for (tag, key), values in sorted(layer_acc.items()):
            layer, kind = key.split("/")
            mean, std = _mean_std(values)
            rows.append([tag, int(layer), kind, len(values), mean, std])
        path = report_dir / "layer_sparsity.csv"
        _write_csv(path, ["ticket", "layer", "kind", "seeds",
                          "surviving_pct_mean", "surviving_pct_std"], rows)
        written["layer_sparsity"] = path

    # --- per-epoch curves ---
    if curve_rows:
        skip = {"stage", "seed", "config_hash", "epoch"}
        fields = sorted({
            k for recs in curve_rows.values() for r in recs for k in r
            if k not in skip and isinstance(r[k], (int, float)) and not isinstance(r[k], bool)
        })
        rows = []
        for (stage, epoch), recs in sorted(curve_rows.items()):
            row = [stage, epoch, len(recs)]
            for f in fields:
                vals = [r[f] for r in recs if f in r]
                if vals:
                    mean, std = _mean_std(vals)
                    row.extend([mean, std])
                else:
                    row.extend(["", ""])
            rows.append(row)
        header = ["stage", "epoch", "seeds"]
        for f in fields:
            header.extend([f"{f}_mean", f"{f}_std"])
        path = report_dir / "curves.csv"
        _write_csv(path, header, rows)
        written["curves"] = path

    return written
