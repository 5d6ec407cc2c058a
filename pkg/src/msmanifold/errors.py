"""Exception types shared across the package.

Every error raised on a violated contract derives from MsManifoldError so
callers (and the CLI) can distinguish our diagnostics from genuine bugs.
"""


class MsManifoldError(Exception):
    pass


class ConfigError(MsManifoldError):
    """Problem/run configuration failed validation."""


# -- problem construction ---------------------------------------------------

class OrderingViolation(ConfigError):
    """Exponents do not satisfy beta < zeta < gamma < alpha."""


class SpectralGapViolation(ConfigError):
    """Some eigenvalue falls strictly between beta and alpha."""


class NonzeroAtOrigin(ConfigError):
    """Nonlinearity or noise does not vanish at the origin."""


class DegenerateGap(MsManifoldError):
    """Gap arithmetic undefined: alpha <= gamma."""


class StableBackwardTime(MsManifoldError):
    """Semigroup applied at t < 0 on a block containing stable modes."""


# -- resolvent machinery ----------------------------------------------------

class NonpositiveLambda(MsManifoldError):
    pass


class LambdaInSpectrum(MsManifoldError):
    pass


class LadderNotConverged(MsManifoldError):
    """Successive lambda-ladder extrapolants differ above tolerance."""


class KappaBelowVartheta(MsManifoldError):
    """c_kappa requires kappa > vartheta."""


# -- stochastic integration -------------------------------------------------

class GridMismatch(MsManifoldError):
    """Grids, ensembles or anchors are not aligned to the same dt lattice."""


class NonfiniteState(MsManifoldError):
    """State overflowed (|u| > cap) or went NaN; reports step and sample."""

    def __init__(self, msg, step=None, sample=None):
        super().__init__(msg)
        self.step = step
        self.sample = sample


class AdaptednessViolation(MsManifoldError):
    """Caller handed a non-adapted integrand to a martingale-zero rule."""


# -- regression -------------------------------------------------------------

class IllConditionedDesign(MsManifoldError):
    """Regression design condition number above threshold after ridge."""


class Underdetermined(MsManifoldError):
    """Fewer than 3x basis-size samples."""


# -- fixed-point solvers ----------------------------------------------------

class GapViolation(MsManifoldError):
    """Solver invoked although the relevant gap condition fails."""


class TruncationTooShort(MsManifoldError):
    """Weighted-norm tail estimate for the truncated window exceeds budget."""


class MaxIterExceeded(MsManifoldError):
    """Fixed-point iteration did not reach tolerance; carries the trace."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class ConsistencyFailure(MsManifoldError):
    """Dual evaluations of the graph value disagree beyond 2*tol."""


# -- oracles ----------------------------------------------------------------

class NoSeparation(MsManifoldError):
    """Coupled unstable/stable spectra overlap; Sylvester solve ill-posed."""
