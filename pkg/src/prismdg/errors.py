"""Exception types shared across the solver."""


class PrismError(Exception):
    """Base class for all solver errors."""


class NonPositiveArea(PrismError):
    """A triangle has non-positive signed area (wrong orientation or degenerate)."""


class NonPositiveLength(PrismError):
    """A length scale that must be positive is not."""


class DryColumn(PrismError):
    """Water depth H = eta - b is non-positive somewhere."""

    def __init__(self, column, depth=None):
        self.column = int(column)
        self.depth = depth
        msg = f"dry column {column}" + (f" (H = {depth:g})" if depth is not None else "")
        super().__init__(msg)


class DegenerateLayer(PrismError):
    """A prism layer has zero or negative thickness (or m_z is undefined)."""


class NonConforming(PrismError):
    """Adjacent columns have different layer counts across a shared edge."""


class ShapeMismatch(PrismError):
    """Field/layout component counts or sizes disagree."""


class SingularMass(PrismError):
    """A 2D mass matrix is singular (J2D <= 0)."""


class ZeroPivot(PrismError):
    """Gaussian elimination hit a zero pivot (loss of diagonal dominance)."""

    def __init__(self, layer, node):
        self.layer = int(layer)
        self.node = int(node)
        super().__init__(f"zero pivot at layer {layer}, node {node}")


class CflViolation(PrismError):
    """The external-mode step exceeds the explicit stability threshold."""


class TooManyRanks(PrismError):
    """More ranks requested than elements available."""


class ChannelClosed(PrismError):
    """A message channel was used after shutdown."""


class MapMismatch(PrismError):
    """Send/recv maps disagree between two ranks."""


class ScheduleViolation(PrismError):
    """An interior task read ghost data while an exchange was in flight."""


class UnknownConfigKey(PrismError):
    """A configuration file contains an unrecognized key."""

    def __init__(self, key, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown config key '{key}'{where}")
