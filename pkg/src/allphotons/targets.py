"""Binary transmission masks used by the simulations and tests.

Masks are ``(nx, ny)`` arrays indexed ``[ix, iy]`` on the scene grid, whose
pixel ``i`` is centered at ``(i - n // 2) * pixel_size``.
"""

import numpy as np

from .tensor import Image2D

__all__ = ["wedge", "two_bars", "letter_a", "open_mask", "make_target"]


def _coords(nx, ny, pixel_size):
    x = (np.arange(nx) - nx // 2) * pixel_size
    y = (np.arange(ny) - ny // 2) * pixel_size
    return np.meshgrid(x, y, indexing="ij")


def open_mask(nx=32, ny=32, pixel_size=2.0):
    return Image2D(np.ones((nx, ny)), pixel_size)


def wedge(nx=32, ny=32, pixel_size=2.0, length=24.0, width=16.0):
    """Filled isosceles triangle with its apex at -x and base at +x.

    The half-width grows linearly from 0 to ``width / 2`` over ``length`` mm,
    centered on the grid midpoint.
    """
    x, y = _coords(nx, ny, pixel_size)
    u = (x + length / 2.0) / length
    inside = (u >= 0) & (u <= 1) & (np.abs(y) <= u * width / 2.0 + 1e-9)
    return Image2D(inside.astype(float), pixel_size)


def two_bars(separation, nx=32, ny=32, pixel_size=2.0, bar_width=2.0, bar_length=10.0):
    """Two parallel bars along y, separated along x by ``separation`` mm.

    Each bar is ``bar_width`` by ``bar_length`` mm. The gap between the bars
    is ``floor(separation / pixel_size)`` pixels and the pair is centered.
    """
    data = np.zeros((nx, ny))
    bw = max(1, int(round(bar_width / pixel_size)))
    bl = max(1, int(round(bar_length / pixel_size)))
    gap = int(np.floor(separation / pixel_size))
    total = 2 * bw + gap
    x0 = nx // 2 - total // 2
    y0 = ny // 2 - bl // 2
    if x0 < 0 or x0 + total > nx or y0 < 0 or y0 + bl > ny:
        raise ValueError("bars do not fit on the grid")
    data[x0:x0 + bw, y0:y0 + bl] = 1.0
    data[x0 + bw + gap:x0 + total, y0:y0 + bl] = 1.0
    return Image2D(data, pixel_size)


def letter_a(nx=32, ny=32, pixel_size=2.0, height=24.0, stroke=4.0):
    """Capital "A": two slanted legs and a crossbar, apex toward -y."""
    x, y = _coords(nx, ny, pixel_size)
    half = height / 2.0
    v = (y + half) / height  # 0 at the apex, 1 at the feet
    inside_v = (v >= 0) & (v <= 1)
    leg_center = v * height * 0.4
    legs = inside_v & (np.abs(np.abs(x) - leg_center) <= stroke / 2.0)
    bar = (np.abs(v - 0.6) * height <= stroke / 4.0 + 1e-9) & (np.abs(x) <= 0.6 * height * 0.4)
    return Image2D((legs | bar).astype(float), pixel_size)


def make_target(name, nx=32, ny=32, pixel_size=2.0, **kwargs):
    """Target by name: ``open``, ``wedge``, ``bars`` or ``A``."""
    builders = {"open": open_mask, "wedge": wedge, "bars": two_bars, "A": letter_a}
    if name not in builders:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(builders)}")
    if name == "bars":
        return two_bars(kwargs.pop("separation", 10.0), nx, ny, pixel_size, **kwargs)
    return builders[name](nx, ny, pixel_size, **kwargs)
