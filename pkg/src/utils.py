"""
Utilities for the GMWB Monte Carlo engine.

Parsing helpers for command-line lists and conversion of result objects
into JSON-ready values.
"""

import dataclasses
import math
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np

from exceptions import UsageError


def parse_float_list(text: Optional[str], name: str = "list") -> List[float]:
    """
    Parse a comma separated list of numbers.

    Args:
        text: e.g. "0,0.1,0.2"; None or blank gives an empty list
        name: Option name used in the error message

    Raises:
        UsageError: If an item is not a number
    """
    if text is None or not text.strip():
        return []
    values = []
    for item in text.split(","):
        item = item.strip()
        try:
            values.append(float(item))
        except ValueError:
            raise UsageError(f"Invalid number '{item}' in --{name}")
    return values


def merge_lists(*candidates: Optional[Sequence[float]]) -> List[float]:
    """First non-empty candidate, as floats."""
    for candidate in candidates:
        if candidate:
            return [float(x) for x in candidate]
    return []


def to_jsonable(value: Any) -> Any:
    """Recursively convert dataclasses, enums, paths and numpy values for json.dump."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return to_jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value
