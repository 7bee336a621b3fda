"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
versions in :mod:`ptadapt._fallback` are used. Both expose the same three
functions, so callers go through this module only.
"""

from __future__ import annotations

from types import ModuleType

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = ("cython", "python")

_active: ModuleType = _compiled if _compiled is not None else _fallback


def available_backends() -> list[str]:
    return ["cython", "python"] if _compiled is not None else ["python"]


def active_backend() -> str:
    return "cython" if _active is _compiled else "python"


def set_backend(name: str) -> None:
    global _active
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        _active = _compiled
    elif name == "python":
        _active = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")


def get(name: str | None = None) -> ModuleType:
    if name is None:
        return _active
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        return _compiled
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")


def solve_square(cost):
    return _active.solve_square(cost)


def nearest_indices(dist):
    return _active.nearest_indices(dist)


def link_components(nn):
    return _active.link_components(nn)
