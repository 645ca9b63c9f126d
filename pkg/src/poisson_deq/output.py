# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import json
import math
from pathlib import Path
from typing import Any, Mapping

import numpy as np


def jsonable(value: Any) -> Any:
    """
    Plain JSON types only: numpy scalars and arrays are unwrapped and
    non-finite floats become null.
    """
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def formatted(data: Mapping[str, Any], format: str):
    if format == "json":
        return json.dumps(jsonable(data), indent=2, sort_keys=True, allow_nan=False)
    raise ValueError(f"Unsupported output format {format}")
