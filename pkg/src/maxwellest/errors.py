"""Exception types shared across the package."""


class MaxwellestError(Exception):
    """Base class for all package errors."""


class MeshFormatError(MaxwellestError, ValueError):
    """Raised when a mesh file cannot be parsed.

    Carries the 1-based line number where parsing failed, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class InvalidMeshError(MaxwellestError, ValueError):
    """Mesh data is structurally invalid (degenerate tet, bad boundary, ...)."""


class NonconformingMeshError(InvalidMeshError):
    """A face is shared by more than two tetrahedra."""


class UnsupportedDegreeError(MaxwellestError, ValueError):
    """Polynomial or quadrature degree outside the supported range."""


class DegenerateElementError(MaxwellestError, ValueError):
    """Affine element map has a near-zero Jacobian determinant."""


class SolverFailure(MaxwellestError, RuntimeError):
    """Linear solver did not meet its residual contract.

    The achieved relative residual is stored in ``residual``.
    """

    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (achieved residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class EquilibrationError(MaxwellestError, RuntimeError):
    """A local reconstruction violated a feasibility or residual tolerance."""


class InfeasibleConstraintsError(EquilibrationError):
    """Constraint rows of a local least-squares problem are inconsistent."""


class NumericalFailure(MaxwellestError, RuntimeError):
    """A dense factorization broke down unexpectedly."""
