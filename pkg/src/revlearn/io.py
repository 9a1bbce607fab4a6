"""Bit-stable JSON, human-readable CSV, and distribution dumps."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .model import CoreParams, ModelConfig, OutputDistribution, init_core


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    # 17 significant digits round-trips every float64 exactly
    return format(x, ".16e")


def _encode(obj: Any, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_fmt_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj, key=str)):
            if i:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(obj.tolist() if isinstance(obj, np.ndarray) else obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, no whitespace, floats as ``%.16e``."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out) + "\n"


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _human(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6g")
    return str(value)


def write_csv(columns: Sequence[str], rows: Sequence[Sequence], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_human(v) for v in row])
    return path


def format_table(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(columns)] + [[_human(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def save_distributions(dists: Sequence[OutputDistribution], path) -> Path:
    payload = {
        "format": "revlearn.distributions/1",
        "distributions": [{"prompt_id": d.prompt_id, "probs": d.probs} for d in dists],
    }
    return write_json(payload, path)


def load_distributions(path) -> list[OutputDistribution]:
    try:
        payload = read_json(path)
        items = payload["distributions"]
        return [OutputDistribution(probs=np.asarray(d["probs"], dtype=np.float64),
                                   prompt_id=str(d["prompt_id"])) for d in items]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"cannot read distribution dump {path}: {exc}") from exc


def save_core(core: CoreParams, path) -> Path:
    """Store a core as ``.npz``: its config as JSON plus every array in canonical order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"a{i:02d}": a for i, a in enumerate(core.arrays())}
    with path.open("wb") as fh:
        np.savez(fh, config=np.array(json.dumps(core.config.to_dict(), sort_keys=True)), **arrays)
    return path


def load_core(path) -> CoreParams:
    try:
        with np.load(path, allow_pickle=False) as data:
            config = ModelConfig(**json.loads(str(data["config"])))
            keys = sorted(k for k in data.files if k != "config")
            arrays = [data[k] for k in keys]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"cannot read core file {path}: {exc}") from exc
    return init_core(config).replace_arrays(arrays)
