"""
Report emission.

Every command writes into the output directory with fixed file names so
reruns with the same config and seed produce byte-identical files:

    config.json                 resolved config + hash
    <name>_summary.json         summary dict
    <name>_<table>.csv          curves / matrices
    <name>_<records>.ndjson     per-sample records

Each output carries the config hash and seed (JSON fields, CSV columns,
NDJSON record fields).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.utils.config import ExperimentConfig, config_hash
from src.utils.io import read_json, write_csv, write_json, write_ndjson

logger = logging.getLogger(__name__)

PROVENANCE_FIELDS = ["config_hash", "seed"]


@dataclass
class ExperimentResults:
    name: str
    config: ExperimentConfig
    summary: dict = field(default_factory=dict)
    # table name -> (field names, rows)
    tables: Dict[str, Tuple[List[str], List[dict]]] = field(default_factory=dict)
    records: Dict[str, List[dict]] = field(default_factory=dict)


def to_jsonable(obj):
    """Plain JSON types; numpy scalars/arrays unwrapped and non-finite floats mapped to None."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def write_config(config: ExperimentConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.json"
    write_json(path, {"config_hash": config_hash(config), "config": config.model_dump(mode="json")})
    return path


def emit_report(results: ExperimentResults, out_dir=None) -> List[Path]:
    """
    Write the summary, tables, records and resolved config of one command.

    Returns:
        list of written paths

    Raises:
        OSError: if out_dir is not writable
    """
    out_dir = Path(out_dir or results.config.out_dir)
    provenance = {"config_hash": config_hash(results.config), "seed": results.config.seed}
    written = [write_config(results.config, out_dir)]

    path = out_dir / f"{results.name}_summary.json"
    write_json(path, to_jsonable({**provenance, **results.summary}))
    written.append(path)

    for table, (fieldnames, rows) in results.tables.items():
        path = out_dir / f"{results.name}_{table}.csv"
        write_csv(
            path,
            [{**to_jsonable(row), **provenance} for row in rows],
            fieldnames=list(fieldnames) + PROVENANCE_FIELDS,
        )
        written.append(path)

    for stream, records in results.records.items():
        path = out_dir / f"{results.name}_{stream}.ndjson"
        write_ndjson(path, [{**to_jsonable(rec), **provenance} for rec in records])
        written.append(path)

    for p in written:
        logger.info(f"Wrote {p}")
    return written


def collect_report(out_dir, config: Optional[ExperimentConfig] = None) -> Path:
    """
    Merge every <name>_summary.json under out_dir into report.json.

    Summaries whose hash differs from the current config are kept but listed
    under "stale".
    """
    out_dir = Path(out_dir)
    current = config_hash(config) if config is not None else None
    summaries, stale = {}, []
    for path in sorted(out_dir.glob("*_summary.json")):
        name = path.name[: -len("_summary.json")]
        summary = read_json(path)
        summaries[name] = summary
        if current is not None and summary.get("config_hash") != current:
            logger.warning(f"{path.name} was produced with a different config")
            stale.append(name)
    path = out_dir / "report.json"
    write_json(path, {"config_hash": current, "summaries": summaries, "stale": stale})
    print(f"Collected {len(summaries)} summaries into {path}")
    return path
