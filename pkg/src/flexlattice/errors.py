"""Exception hierarchy shared by all flexlattice modules."""

from __future__ import annotations


class FlexLatticeError(Exception):
    """Base class for every error raised by this package."""


# signals
class MissingFile(FlexLatticeError, FileNotFoundError):
    pass


class MalformedRow(FlexLatticeError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class GridMismatch(FlexLatticeError, ValueError):
    pass


class NonFiniteInput(FlexLatticeError, ValueError):
    pass


# devices
class NegativePower(FlexLatticeError, ValueError):
    pass


class NonFiniteState(FlexLatticeError, ValueError):
    pass


class Infeasible(FlexLatticeError, ValueError):
    def __init__(self, deficit: float):
        super().__init__(f"target unreachable before deadline, deficit {deficit:.6g} kWh")
        self.deficit = deficit


# flexfunc
class NegativeTime(FlexLatticeError, ValueError):
    pass


class GridTooCoarse(FlexLatticeError, ValueError):
    pass


class NoResponse(FlexLatticeError, ValueError):
    pass


class NonCanonical(FlexLatticeError, ValueError):
    """Raised when the refined fit leaves too much residual energy.

    The best-effort fit is kept on ``fit`` so callers can still use it.
    """

    def __init__(self, fit, residual_fraction: float):
        super().__init__(f"residual energy fraction {residual_fraction:.3g} exceeds 0.1")
        self.fit = fit
        self.residual_fraction = residual_fraction


# aggregator
class NonFiniteMeasurement(FlexLatticeError, ValueError):
    pass


class MissingEstimate(FlexLatticeError, KeyError):
    def __init__(self, device_id: str):
        super().__init__(device_id)
        self.device_id = device_id


class TargetUnreachable(FlexLatticeError, ValueError):
    def __init__(self, penalty, residual, fraction: float):
        super().__init__(f"tracking residual is {fraction:.1%} of requested deviation energy")
        self.penalty = penalty
        self.residual = residual
        self.fraction = fraction


# market
class WindowOutOfGrid(FlexLatticeError, ValueError):
    pass


class EmptyWindow(FlexLatticeError, ValueError):
    pass


# grid
class UnmappedDevice(FlexLatticeError, KeyError):
    def __init__(self, device_id: str):
        super().__init__(device_id)
        self.device_id = device_id


# engine / cli
class ConfigError(FlexLatticeError, ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field


class ZeroMeanLoad(FlexLatticeError, ValueError):
    pass


class MissingTrace(FlexLatticeError, FileNotFoundError):
    pass
