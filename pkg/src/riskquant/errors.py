"""Exception types shared across the toolkit."""


class RiskQuantError(Exception):
    """Base class for all toolkit errors."""


class InputError(RiskQuantError):
    """Malformed or unusable input data (files, columns, cells)."""


class EmptyConditioningEvent(RiskQuantError):
    """A conditional expectation was requested over an event with zero mass."""


class SupportTooSmall(RiskQuantError):
    """The sample has too few distinct points for the requested solver."""


class InfeasibleConstraint(RiskQuantError):
    """A constraint or guard makes the requested computation impossible."""
