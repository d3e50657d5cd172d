"""Built-in microphone array geometries.

Two layouts ship with the package:

* ``em32``: 32 capsules on a 4.2 cm sphere (angular layout loaded from
  ``data/em32_angles.csv``).
* ``double_square``: 8 microphones on two stacked horizontal squares, the top
  square rotated by pi/4, overall diameter 37.5 cm.  The vertical spacing
  between the squares is half the square side (the reference drawing does not
  state it).
"""

from importlib import resources

import numpy as np

from .errors import ValidationError
from .geometry import MicArray

EM32_RADIUS = 0.042
DOUBLE_SQUARE_DIAMETER = 0.375


def _em32_positions() -> np.ndarray:
    text = resources.files("roominv.data").joinpath("em32_angles.csv").read_text()
    rows = [line.split(",") for line in text.splitlines()
            if line.strip() and not line.startswith("#")]
    angles = np.deg2rad(np.array(rows, dtype=np.float64))
    colat, azi = angles[:, 0], angles[:, 1]
    return EM32_RADIUS * np.column_stack([
        np.sin(colat) * np.cos(azi),
        np.sin(colat) * np.sin(azi),
        np.cos(colat),
    ])


def em32(scale: float = 1.0) -> MicArray:
    """32-element spherical array, radius 4.2 cm times ``scale``."""
    return MicArray("em32", _em32_positions() * float(scale))


def double_square(scale: float = 1.0) -> MicArray:
    """8-element double-square array (two stacked squares, top rotated 45 deg)."""
    circ_radius = DOUBLE_SQUARE_DIAMETER / 2.0
    side = circ_radius * np.sqrt(2.0)
    z = side / 4.0  # half of the inter-square spacing (= side / 2)
    positions = []
    for k in range(4):
        az = k * np.pi / 2.0
        positions.append([circ_radius * np.cos(az), circ_radius * np.sin(az), -z])
    for k in range(4):
        az = np.pi / 4.0 + k * np.pi / 2.0
        positions.append([circ_radius * np.cos(az), circ_radius * np.sin(az), z])
    return MicArray("double_square", np.array(positions) * float(scale))


_REGISTRY = {
    "em32": em32,
    "double_square": double_square,
}


def get_array(name: str, scale: float = 1.0) -> MicArray:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValidationError(
            f"unknown array {name!r}; available: {sorted(_REGISTRY)}") from None
    return factory(scale)
