"""Exception hierarchy shared by all swapflow modules.

The CLI maps these onto process exit codes, so new error types should
subclass one of the four categories below rather than Exception.
"""


class SwapflowError(Exception):
    """Base class for all swapflow errors."""


class SpecError(SwapflowError):
    """Invalid model specification (bad dimensions, unknown dtype, ...)."""


class InputError(SwapflowError):
    """Caller passed values that violate an operation's preconditions."""


class FormatError(SwapflowError):
    """A file or payload does not conform to its declared format."""


class StoreError(SwapflowError):
    """I/O failure or corruption while packing or reading a weight store."""


class PlanningError(SwapflowError):
    """The planner cannot produce a feasible plan for the given budget."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BudgetFault(SwapflowError):
    """Hard fault: accounted DRAM exceeded the plan's budget during decode."""

    def __init__(self, message: str, token: int, group: int, resident_bytes: int, budget: int):
        super().__init__(message)
        self.token = token
        self.group = group
        self.resident_bytes = resident_bytes
        self.budget = budget
