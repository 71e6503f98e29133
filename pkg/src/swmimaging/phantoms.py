"""Bundled test objects.

These are stylised stand-ins for typical resolution targets, not copies of
any particular physical object. Values are transmissions in [0, 1].

three-slit (14 px)     0 0 1 1 0 0 1 1 0 0 1 1 0 0
binary-bars (16 px)    0 0 1 1 1 0 1 1 0 1 0 0 1 1 0 0
grey-bars (16 px)      0 0 .4 .4 .9 .2 .7 .7 0 .5 .1 .1 1 .6 0 0
digit-5 (8 x 6 px)     a block "5" drawn with 1-px strokes inside a zero frame
"""

from __future__ import annotations

import numpy as np

from .optics import ObjectModel

_DIGIT5 = """
......
.####.
.#....
.###..
....#.
....#.
.###..
......
"""

_PHANTOMS = {
    "three-slit": [0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0],
    "binary-bars": [0, 0, 1, 1, 1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 0],
    "grey-bars": [0, 0, 0.4, 0.4, 0.9, 0.2, 0.7, 0.7, 0, 0.5, 0.1, 0.1, 1, 0.6, 0, 0],
}


def _digit5() -> np.ndarray:
    rows = [r for r in _DIGIT5.strip().splitlines()]
    return np.array([[1.0 if c == "#" else 0.0 for c in r] for r in rows])


def phantom_names() -> list:
    return sorted([*_PHANTOMS, "digit-5"])


def phantom_array(name: str) -> np.ndarray:
    if name == "digit-5":
        return _digit5()
    try:
        return np.array(_PHANTOMS[name], dtype=float)
    except KeyError:
        raise ValueError(f"unknown phantom {name!r}; choose from {phantom_names()}") from None


def phantom(name: str, pixel_size: float) -> ObjectModel:
    return ObjectModel.from_array(phantom_array(name), pixel_size)
