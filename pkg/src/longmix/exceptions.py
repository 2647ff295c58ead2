"""Exception hierarchy shared by every longmix module."""


class LongmixError(Exception):
    """Base class for all errors raised by longmix."""


class DataError(LongmixError, ValueError):
    """Malformed or inconsistent input data."""


class MissingColumn(DataError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing required column {name!r}")


class NonNumeric(DataError):
    def __init__(self, row, column, value=None):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}: column {column!r} is not numeric ({value!r})")


class InvalidBorough(DataError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"invalid borough code {value!r}; expected one of M, Bk, Bx, Q")


class InvalidValue(DataError):
    pass


class UnbalancedPanel(DataError):
    def __init__(self, pair_ids):
        self.pair_ids = list(pair_ids)
        shown = ", ".join(self.pair_ids[:10])
        more = "" if len(self.pair_ids) <= 10 else f" (+{len(self.pair_ids) - 10} more)"
        super().__init__(f"pairs without exactly 12 distinct months: {shown}{more}")


class EmptyInput(DataError):
    pass


class NotEnoughCompletePairs(DataError):
    def __init__(self, available, requested):
        self.available, self.requested = available, requested
        super().__init__(
            f"requested {requested} pairs but only {available} have all 12 months"
        )


class OutOfRange(DataError):
    pass


class InconsistentWeather(DataError):
    def __init__(self, month, column=None):
        self.month, self.column = month, column
        where = f" ({column})" if column else ""
        super().__init__(f"weather values disagree within month {month}{where}")


class EmptyStratum(DataError):
    pass


class DesignError(LongmixError, ValueError):
    """A model specification cannot be turned into design matrices."""


class UnknownColumn(DesignError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown column {name!r}")


class RankDeficientFixed(DesignError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            "fixed-effects design is rank deficient; dependent columns: "
            + ", ".join(self.columns)
        )


class EmptyTermList(DesignError):
    pass


class CrossedGroups(DesignError):
    def __init__(self, pair_ids):
        self.pair_ids = list(pair_ids)
        super().__init__(
            "pairs appear under more than one origin borough: " + ", ".join(self.pair_ids)
        )


class ModelError(LongmixError):
    """Numerical failures of the mixed-model engine."""


class RhoOutOfRange(ModelError, ValueError):
    pass


class NonPositiveSigma(ModelError, ValueError):
    pass


class DimensionMismatch(ModelError, ValueError):
    pass


class DecodeFailure(ModelError, ValueError):
    pass


class NumericalBreakdown(ModelError, ArithmeticError):
    pass


class SingularInformation(ModelError, ArithmeticError):
    def __init__(self, condition_number):
        self.condition_number = condition_number
        super().__init__(
            f"fixed-effects information matrix is singular (condition number {condition_number:.3g})"
        )


class NonConvergence(ModelError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"optimizer did not converge: {report.get('message', '')}")


class NotConverged(ModelError):
    pass


class IncomparableFits(ModelError, ValueError):
    pass


class ConstantColumn(LongmixError, ValueError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"column {name!r} has zero variance")


class KOutOfRange(LongmixError, ValueError):
    pass


class MissingMonthScore(LongmixError, ValueError):
    def __init__(self, month):
        self.month = month
        super().__init__(f"no principal component scores for month {month}")
