"""File-based persistence: output root, binary artifacts and CSV/JSON reports.

Binary artifacts share one layout: a single UTF-8 JSON header line, then raw
little-endian arrays in the order the header lists them.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from utils.error_handling import DatasetValidationError

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MODADD_OUTPUT_ROOT"
DATASET_SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA_VERSION = 1


def resolve_output_root() -> Path:
    """Determine a writable output root, falling back to the workspace if needed."""
    env_path = os.getenv(OUTPUT_ROOT_ENV)
    if env_path:
        candidate = Path(env_path).expanduser()
        candidate.mkdir(parents=True, exist_ok=True)
        return candidate

    default_path = Path.home() / ".modaddlab" / "runs"
    try:
        default_path.mkdir(parents=True, exist_ok=True)
        marker = default_path / ".write_check"
        with marker.open("a", encoding="utf-8"):
            pass
        marker.unlink()
        return default_path
    except PermissionError:
        fallback = Path.cwd() / ".modaddlab" / "runs"
        fallback.mkdir(parents=True, exist_ok=True)
        logger.warning(
            "Permission denied for %s, falling back to %s",
            default_path,
            fallback,
        )
        return fallback


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array.astype(array.dtype.newbyteorder("<"), copy=False))


def write_arrays(path: Path, header: Dict[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    """Write ``header`` plus the arrays; the array table is appended to the header."""
    table: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    for name, array in arrays.items():
        data = _little_endian(np.asarray(array))
        table.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape)})
        payloads.append(data.tobytes(order="C"))
    full_header = dict(header)
    full_header["arrays"] = table
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n")
        for payload in payloads:
            handle.write(payload)
    return path


def read_arrays(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of :func:`write_arrays`."""
    path = Path(path)
    with path.open("rb") as handle:
        header = json.loads(handle.readline().decode("utf-8"))
        arrays: Dict[str, np.ndarray] = {}
        for entry in header.get("arrays", []):
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            raw = handle.read(size * dtype.itemsize)
            if len(raw) != size * dtype.itemsize:
                raise DatasetValidationError(
                    f"{path} is truncated in array {entry['name']!r}",
                    suggestion="Regenerate the file",
                )
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if handle.read(1):
            raise DatasetValidationError(f"{path} has trailing bytes after the last array")
    return header, arrays


def dataset_row_dtype(N: int) -> np.dtype:
    """Fixed-width row: N int32 entries, then the int64 label and quotient."""
    return np.dtype([("x", "<i4", (N,)), ("y_q", "<i8"), ("quotient", "<i8")])


def write_dataset_rows(
    path: Path, header: Dict[str, Any], x: np.ndarray, y_q: np.ndarray, quotient: np.ndarray
) -> Path:
    rows = np.zeros(len(x), dtype=dataset_row_dtype(x.shape[1]))
    rows["x"] = x
    rows["y_q"] = y_q
    rows["quotient"] = quotient
    full_header = dict(header)
    full_header["schema_version"] = DATASET_SCHEMA_VERSION
    full_header["row_bytes"] = rows.dtype.itemsize
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n")
        handle.write(rows.tobytes())
    return path


def read_dataset_rows(path: Path) -> Tuple[Dict[str, Any], np.ndarray]:
    path = Path(path)
    with path.open("rb") as handle:
        try:
            header = json.loads(handle.readline().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DatasetValidationError(
                f"{path} does not start with a JSON header",
                suggestion="Is this a dataset written by `gen`?",
                original_error=exc,
            ) from exc
        version = header.get("schema_version")
        if version != DATASET_SCHEMA_VERSION:
            raise DatasetValidationError(
                f"{path} has schema version {version}, expected {DATASET_SCHEMA_VERSION}",
                suggestion="Regenerate the dataset with this version of the tool",
            )
        dtype = dataset_row_dtype(int(header["N"]))
        body = handle.read()
    if len(body) % dtype.itemsize:
        raise DatasetValidationError(f"{path} ends with a partial row")
    rows = np.frombuffer(body, dtype=dtype)
    if "count" in header and len(rows) != int(header["count"]):
        raise DatasetValidationError(
            f"{path} holds {len(rows)} rows but its header promises {header['count']}"
        )
    return header, rows


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, pd.DataFrame):
        return value.to_dict(orient="records")
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def save_json(path: str | Path, payload: Any) -> Path:
    """Persist a JSON-serialisable payload (pydantic models included)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    with target.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2, default=_jsonable)
    return target


def load_json(path: str | Path) -> Any:
    with Path(path).open("r", encoding="utf-8") as handle:
        return json.load(handle)


def save_csv(path: str | Path, frame: pd.DataFrame, *, index: bool = False) -> Path:
    """UTF-8 CSV with a header row and '.' decimals."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(target, index=index, encoding="utf-8", float_format="%.10g")
    return target


__all__ = [
    "DATASET_SCHEMA_VERSION",
    "CHECKPOINT_SCHEMA_VERSION",
    "dataset_row_dtype",
    "load_json",
    "read_arrays",
    "read_dataset_rows",
    "resolve_output_root",
    "save_csv",
    "save_json",
    "write_arrays",
    "write_dataset_rows",
]
