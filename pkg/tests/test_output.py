# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import math
from pathlib import Path

import numpy as np
import pytest

from poisson_deq import output


def test_json_format():
    s = output.formatted({"residual": 0.5, "graph_id": "g1"}, "json")

    assert (
        s
        == """{
  "graph_id": "g1",
  "residual": 0.5
}"""
    )


def test_json_non_finite_is_null():
    s = output.formatted({"mean": math.nan, "std": math.inf}, "json")

    assert (
        s
        == """{
  "mean": null,
  "std": null
}"""
    )


def test_unsupported_format():
    with pytest.raises(ValueError):
        output.formatted({}, "yaml")


def test_jsonable_numpy():
    data = {
        "counts": np.array([1, 2]),
        "value": np.float64(0.25),
        "flag": np.bool_(True),
        "path": Path("out/eval"),
        "nested": [(np.int64(3), np.nan)],
    }

    assert output.jsonable(data) == {
        "counts": [1, 2],
        "value": 0.25,
        "flag": True,
        "path": "out/eval",
        "nested": [[3, None]],
    }
