"""Per-split and pooled summary tables over per-scan metric CSVs."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, SchemaError
from .metrics import CSV_COLUMNS, METRIC_FIELDS

DISTANCE_FIELDS = ("crd", "cad", "msd", "hd95")
DEGENERATE_FLAGS = ("empty_pred", "empty_gt")


def read_metrics_csv(path) -> List[dict]:
    """Rows of a per-scan metrics CSV with metric fields as floats."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise SchemaError(f"{path}: columns {reader.fieldnames}, expected {list(CSV_COLUMNS)}")
        rows = list(reader)
    return [_parse_row(r, path) for r in rows]


def _parse_row(row: Mapping, where="") -> dict:
    missing = [c for c in CSV_COLUMNS if c not in row]
    if missing:
        raise SchemaError(f"{where}: row lacks columns {missing}")
    out = {"scan_id": str(row["scan_id"]), "split": str(row["split"])}
    tags = row["tags"]
    out["tags"] = tuple(t for t in tags.split(";") if t) if isinstance(tags, str) else tuple(tags)
    flags = row["flags"]
    out["flags"] = tuple(f for f in flags.split(";") if f) if isinstance(flags, str) else tuple(flags)
    for name in METRIC_FIELDS:
        value = row[name]
        try:
            out[name] = math.nan if value in ("", None) else float(value)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {name}={value!r} is not a number") from exc
    return out


def _is_degenerate(row) -> bool:
    return any(f in row["flags"] for f in DEGENERATE_FLAGS)


def summarize(values: Sequence[float]) -> dict:
    """n, mean and sample standard deviation (0 for a single value)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "mean": math.nan, "std": math.nan}
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"n": int(v.size), "mean": float(v.mean()), "std": std}


def pool(groups: Sequence[dict]) -> dict:
    """Combine per-group (n, mean, std) into one row.

    The pooled spread is sqrt(sum n_i (std_i^2 + (mean_i - mean)^2) / N),
    i.e. within-group variance plus the spread of the group means.
    """
    groups = [g for g in groups if g["n"] > 0]
    if not groups:
        return {"n": 0, "mean": math.nan, "std": math.nan}
    n = np.array([g["n"] for g in groups], dtype=np.float64)
    mu = np.array([g["mean"] for g in groups])
    sd = np.array([g["std"] for g in groups])
    total = n.sum()
    mean = float((n * mu).sum() / total)
    std = float(math.sqrt((n * (sd ** 2 + (mu - mean) ** 2)).sum() / total))
    return {"n": int(total), "mean": mean, "std": std}


def summarize_rows(rows: Iterable[dict]) -> dict:
    rows = list(rows)
    clean = [r for r in rows if not _is_degenerate(r)]
    table = {"dsc": summarize([r["dsc"] for r in rows])}
    for name in DISTANCE_FIELDS:
        table[name] = summarize([r[name] for r in clean])
    table["scans"] = len(rows)
    table["degenerate"] = len(rows) - len(clean)
    return table


def run_report(split_rows: Mapping[Union[int, str], Union[str, Path, Sequence[dict]]],
               tag_manifest: Optional[dict] = None) -> dict:
    """Build the report document from per-split metrics (CSV paths or parsed rows).

    ``tag_manifest`` (a corpus manifest) overrides the tags column by scan id.
    """
    if not split_rows:
        raise ParameterError("report needs at least one split")
    tag_of = {}
    if tag_manifest is not None:
        tag_of = {c["scan_id"]: tuple(c.get("tags", ())) for c in tag_manifest["cases"]}

    parsed: Dict[str, List[dict]] = {}
    for split, source in split_rows.items():
        if isinstance(source, (str, Path)):
            rows = read_metrics_csv(source)
        else:
            rows = [_parse_row(r, f"split {split}") for r in source]
        for r in rows:
            if r["scan_id"] in tag_of:
                r["tags"] = tag_of[r["scan_id"]]
        parsed[str(split)] = sorted(rows, key=lambda r: r["scan_id"])

    splits = {k: summarize_rows(v) for k, v in sorted(parsed.items())}
    pooled = {name: pool([s[name] for s in splits.values()]) for name in METRIC_FIELDS}
    pooled["scans"] = sum(s["scans"] for s in splits.values())
    pooled["degenerate"] = sum(s["degenerate"] for s in splits.values())

    everything = [r for rows in parsed.values() for r in rows]
    vocab = sorted({t for r in everything for t in r["tags"]})
    tags = {}
    for tag in vocab:
        present = [r for r in everything if tag in r["tags"]]
        absent = [r for r in everything if tag not in r["tags"]]
        tags[tag] = {"present": summarize_rows(present), "absent": summarize_rows(absent)}
    degenerate = [{"split": k, "scan_id": r["scan_id"], "flags": list(r["flags"])}
                  for k, rows in sorted(parsed.items()) for r in rows if _is_degenerate(r)]
    return {"splits": splits, "pooled": pooled, "tags": tags, "degenerate_scans": degenerate}


_HEADERS = {"dsc": "DSC", "crd": "CrD (mm)", "cad": "CaD (mm)", "msd": "MSD (mm)", "hd95": "95%HD (mm)"}


def _cell(stat: dict, digits: int) -> str:
    if stat["n"] == 0:
        return "n/a"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def _table(rows: List[tuple], first: str) -> List[str]:
    header = (first,) + tuple(_HEADERS[m] for m in METRIC_FIELDS)
    widths = [max(len(str(r[i])) for r in rows + [header]) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(c).ljust(w) for c, w in zip(r, widths))
    return [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]


def format_report(doc: dict) -> str:
    """Plain-text rendering: split table with a pooled Mean row, then per-tag groups."""
    def row(label, table):
        return (label,) + tuple(_cell(table[m], 2 if m == "dsc" else 1) for m in METRIC_FIELDS)

    lines = _table([row(k, v) for k, v in doc["splits"].items()] + [row("Mean", doc["pooled"])], "Split")
    if doc["tags"]:
        lines += ["", "By tag (n scans):"]
        rows = []
        for tag, groups in doc["tags"].items():
            for side in ("present", "absent"):
                g = groups[side]
                rows.append(row(f"{tag} {side} ({g['scans']})", g))
        lines += _table(rows, "Group")
    if doc["degenerate_scans"]:
        lines += ["", "Degenerate scans (excluded from distance statistics):"]
        lines += [f"  split {d['split']}: {d['scan_id']} [{';'.join(d['flags'])}]"
                  for d in doc["degenerate_scans"]]
    return "\n".join(lines) + "\n"


def write_report(doc: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(doc))
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True))
