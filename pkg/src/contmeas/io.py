"""Model files, canonical hashing and output emission.

A model file is JSON::

    {
      "name": "decay",
      "dim": 2,
      "H": [[[0, 0], [0, 0]], [[0, 0], [0, 0]]],
      "diffusive": [{"L": <matrix>, "omega": 0.0}],
      "unobserved": [<matrix>, ...],
      "jumps": [{"kraus": [<matrix>, ...], "rate": 1.0}],
      "rho0": <matrix>
    }

Every complex entry is a ``[re, im]`` pair; matrices are nested row lists.
``rho0`` and ``description`` are optional.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from contmeas.operators import MeasurementModel

SCHEMA_VERSION = 1
FLOAT_FORMAT = ".17g"


class ModelFileError(ValueError):
    """Invalid model document; ``line``/``column`` locate syntax errors, ``path`` structural ones."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 path: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}, column {column}")
        if path:
            where.append(f"at {path}")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)
        self.line, self.column, self.path = line, column, path


def complex_to_json(a) -> list:
    """Nested ``[re, im]`` lists for a complex array of any rank."""
    a = np.asarray(a, dtype=complex)
    if a.ndim == 0:
        return [float(a.real), float(a.imag)]
    return [complex_to_json(x) for x in a]


def _matrix(obj, path: str, dim: int | None = None) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise ModelFileError("expected a non-empty list of rows", path=path)
    rows = []
    for i, row in enumerate(obj):
        if not isinstance(row, list):
            raise ModelFileError("expected a row list", path=f"{path}[{i}]")
        vals = []
        for j, entry in enumerate(row):
            if (not isinstance(entry, list) or len(entry) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry)):
                raise ModelFileError("complex entries must be [re, im] number pairs",
                                     path=f"{path}[{i}][{j}]")
            vals.append(complex(entry[0], entry[1]))
        rows.append(vals)
    n = len(rows)
    if any(len(r) != n for r in rows):
        raise ModelFileError("matrix is not square", path=path)
    if dim is not None and n != dim:
        raise ModelFileError(f"dimension mismatch: expected {dim}x{dim}, got {n}x{n}", path=path)
    return np.array(rows, dtype=complex)


def model_to_dict(model: MeasurementModel, rho0=None, description: str | None = None) -> dict:
    out = {
        "name": model.name,
        "dim": model.dim,
        "H": complex_to_json(model.H),
        "diffusive": [{"L": complex_to_json(c.L), "omega": c.omega} for c in model.diffusive],
        "unobserved": [complex_to_json(s) for s in model.unobserved],
        "jumps": [{"kraus": [complex_to_json(k) for k in c.kraus], "rate": c.rate}
                  for c in model.jumps],
    }
    if description is not None:
        out["description"] = description
    if rho0 is not None:
        out["rho0"] = complex_to_json(rho0)
    return out


def _load(document) -> dict:
    if isinstance(document, dict):
        return document
    if isinstance(document, Path):
        document = document.read_text()
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"syntax error: {exc.msg}", exc.lineno, exc.colno) from exc
    if not isinstance(data, dict):
        raise ModelFileError("top level must be an object", 1, 1)
    return data


def _number(obj, path: str) -> float:
    if not isinstance(obj, (int, float)) or isinstance(obj, bool):
        raise ModelFileError("expected a number", path=path)
    return float(obj)


def parse_model_document(document) -> tuple[MeasurementModel, np.ndarray | None, dict]:
    """Parse a model document into ``(model, rho0 or None, raw dict)``."""
    data = _load(document)
    known = {"name", "description", "dim", "H", "diffusive", "unobserved", "jumps", "rho0",
             "schema_version"}
    extra = set(data) - known
    if extra:
        raise ModelFileError(f"unknown keys {sorted(extra)}", path="/")
    if "H" not in data:
        raise ModelFileError("missing required key 'H'", path="/")
    dim = data.get("dim")
    if dim is not None and (not isinstance(dim, int) or isinstance(dim, bool) or dim < 1):
        raise ModelFileError("dim must be a positive integer", path="dim")
    H = _matrix(data["H"], "H", dim)
    dim = H.shape[0]
    if np.max(np.abs(H - H.conj().T)) > 1e-9:
        raise ModelFileError("H is not Hermitian", path="H")
    diffusive = []
    for j, c in enumerate(data.get("diffusive", [])):
        if not isinstance(c, dict) or "L" not in c:
            raise ModelFileError("diffusive channel needs an 'L' matrix", path=f"diffusive[{j}]")
        diffusive.append((_matrix(c["L"], f"diffusive[{j}].L", dim),
                          _number(c.get("omega", 0.0), f"diffusive[{j}].omega")))
    unobserved = [_matrix(s, f"unobserved[{h}]", dim) for h, s in enumerate(data.get("unobserved", []))]
    jumps = []
    for k, c in enumerate(data.get("jumps", [])):
        if not isinstance(c, dict) or not c.get("kraus"):
            raise ModelFileError("jump channel needs a non-empty 'kraus' list", path=f"jumps[{k}]")
        ops = [_matrix(r, f"jumps[{k}].kraus[{m}]", dim) for m, r in enumerate(c["kraus"])]
        rate = _number(c.get("rate", 1.0), f"jumps[{k}].rate")
        if not rate > 0:
            raise ModelFileError(f"nonpositive rate {rate}", path=f"jumps[{k}].rate")
        jumps.append((ops, rate))
    name = data.get("name", "")
    if not isinstance(name, str):
        raise ModelFileError("name must be a string", path="name")
    model = MeasurementModel(H=H, diffusive=diffusive, unobserved=unobserved, jumps=jumps, name=name)
    rho0 = _matrix(data["rho0"], "rho0", dim) if "rho0" in data else None
    return model, rho0, data


def parse_model(document) -> MeasurementModel:
    """Build a :class:`MeasurementModel` from a JSON string, path or already-decoded dict."""
    return parse_model_document(document)[0]


def emit_model(model: MeasurementModel, rho0=None) -> str:
    return json.dumps(model_to_dict(model, rho0), indent=2) + "\n"


def load_model(path) -> tuple[MeasurementModel, np.ndarray | None]:
    model, rho0, _ = parse_model_document(Path(path))
    return model, rho0


def model_hash(model: MeasurementModel) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    canon = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def fmt(x) -> str:
    """Round-trip text for one CSV cell."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), FLOAT_FORMAT)
    return str(x)


def state_columns(d: int, prefix: str = "") -> list[str]:
    cols = []
    for i in range(d):
        for j in range(d):
            cols += [f"{prefix}re_{i}{j}", f"{prefix}im_{i}{j}"]
    return cols


def state_cells(x: np.ndarray) -> list[float]:
    flat = np.asarray(x, dtype=complex).reshape(-1)
    return [v for z in flat for v in (z.real, z.imag)]


def write_csv(path, header: dict, columns: list[str], rows) -> None:
    """CSV with ``#``-prefixed provenance lines, then the column row and data rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key in sorted(header):
            fh.write(f"# {key}: {json.dumps(header[key], sort_keys=True)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Column names and the numeric body of a file written by :func:`write_csv`."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    columns = next(reader)
    body = [[float(v) if v not in ("true", "false") else float(v == "true") for v in r] for r in reader]
    return columns, np.array(body, dtype=float).reshape(len(body), len(columns))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return complex_to_json(obj)
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path, payload: dict) -> None:
    body = {"schema_version": SCHEMA_VERSION, **_jsonable(payload)}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
