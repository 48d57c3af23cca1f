"""Exception types raised across the toolkit."""


class ManihomError(Exception):
    """Base class for all toolkit errors."""


class RadiusExceeded(ManihomError):
    """Tangent vector longer than the declared injectivity floor."""


class StepSizeUnderflow(ManihomError):
    """Geodesic integrator could not meet its accuracy target."""


class NewtonDivergence(ManihomError):
    """Shooting iteration for the log map failed to converge."""


class SeparationTooLarge(ManihomError):
    """Requested net separation is not small against the injectivity floor."""


class ExponentOrderViolated(ManihomError):
    """Partition exponents do not satisfy 1/2 < beta < alpha < 1."""


class PartitionGap(ManihomError):
    """Partition-of-unity denominator dropped below its guaranteed floor."""


class ScaleOrderViolated(ManihomError):
    """Oscillation scale is too coarse against the net scale."""


class ZeroMode(ManihomError):
    """Operation requires a nonzero Fourier mode."""


class NotElliptic(ManihomError):
    """Coefficient field failed a sampled ellipticity check."""


class NoConvergence(ManihomError):
    """Iterative solver exhausted its iteration budget."""


class SingularAssembly(ManihomError):
    """Mesh element with nonpositive metric determinant."""
