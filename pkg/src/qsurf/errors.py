"""Exception types shared across the package."""


class QsurfError(Exception):
    """Base class for all package errors."""


class GeometryError(QsurfError):
    """Invalid or degenerate cross-section geometry."""


class OverlapError(GeometryError):
    """Offset surfaces self-intersect or collide with another region."""


class MeshFailure(QsurfError):
    """Mesh generation could not satisfy its quality or size contract."""

    def __init__(self, message: str, region_id: int | None = None):
        super().__init__(message)
        self.region_id = region_id


class UnknownLayer(QsurfError):
    """A reassignment referenced a layer that is not in the mesh."""


class MissingMaterial(QsurfError):
    """A mesh region has no material assigned."""


class NonConvergence(QsurfError):
    """Iterative solve failed to reach the requested tolerance."""

    def __init__(self, message: str, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class SingularSystem(QsurfError):
    """Linear system is singular (typically no Dirichlet boundary)."""


class PointOutsideDomain(QsurfError):
    """Field evaluation requested outside the meshed domain."""


class NonVacuumSolve(QsurfError):
    """Operation requires a vacuum-only solution (TEM duality)."""


class InsufficientSamples(QsurfError):
    """Too few profile samples inside the requested fit window."""


class InsufficientPoints(QsurfError):
    """Too few sweep points above the extrapolation threshold."""


class DomainError(QsurfError):
    """Requested target lies outside the validity domain of a model."""


class WrongVariable(QsurfError):
    """A study was handed a sweep over the wrong variable."""


class ConfigError(QsurfError):
    """Run configuration file is missing keys or has bad values."""


class ParseError(ConfigError):
    """Configuration text is not valid JSON."""


class UnknownKey(ConfigError):
    """Configuration contains a key outside the documented schema."""


class UnitMismatch(ConfigError):
    """A dimensioned key is missing its unit suffix or uses a wrong one."""
