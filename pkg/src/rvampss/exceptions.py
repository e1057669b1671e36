"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, singular system, NaN).

    ``iteration`` and ``index`` locate the failure when known.
    """

    def __init__(self, message, *, iteration=None, index=None):
        self.base_message = message
        self.iteration = iteration
        self.index = index
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if index is not None:
            where.append(f"index {index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
