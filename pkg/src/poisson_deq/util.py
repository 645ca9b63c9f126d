# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import math
import re
from typing import Any, Optional, Sequence

import numpy as np
import yaml


def parse_node_band(band: str) -> tuple[int, int]:
    """
    Parse a node-count band such as "50-150" or "50:150".
    """

    regex = r"^\s*(?P<lo>\d+)\s*[-:]\s*(?P<hi>\d+)\s*$"

    m = re.match(regex, band)
    if not m:
        raise ValueError(f"Invalid node band {band}")

    lo, hi = int(m.group("lo")), int(m.group("hi"))
    if lo > hi:
        raise ValueError(f"Node band minimum {lo} exceeds maximum {hi}")

    return lo, hi


def parse_override(spec: str) -> tuple[str, str, Any]:
    """
    Split "section.key=value" into its parts. The value is read as YAML, so
    numbers, booleans and lists keep their types.
    """

    regex = r"^(?P<section>[a-z_]+)(\.(?P<key>[a-z_]+))?=(?P<value>.*)$"

    m = re.match(regex, spec)
    if not m:
        raise ValueError(f'Invalid override "{spec}", expected section.key=value')

    return m.group("section"), m.group("key") or "", yaml.safe_load(m.group("value"))


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d)) if d.size else 0.0


def pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """
    Pearson correlation, or None when either side has zero variance.
    """

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return None
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())
