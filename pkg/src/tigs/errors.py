"""Exception types raised across the package.

Each error maps onto a CLI exit-code category (see ``tigs.cli``).
"""

from __future__ import annotations


class TigsError(Exception):
    """Base class for all package errors."""


class FormatError(TigsError, ValueError):
    """Malformed file container (bad magic, header or payload length)."""


class ShapeError(TigsError, ValueError):
    """Tensor rank or extents inconsistent with the operation."""


class MaskError(TigsError, ValueError):
    """Content mask incompatible with the requested construction."""


class DomainError(TigsError, ValueError):
    """Argument outside the domain where a bound is valid."""


class SupportError(TigsError, ValueError):
    """KL divergence requested where support(x) is not inside support(y)."""


class EmptyRegionError(TigsError, ValueError):
    """Row has an empty content region; callers skip the row."""


class EmptyHeadError(TigsError, ValueError):
    """Head has no scoreable rows; callers exclude it from layer statistics."""
