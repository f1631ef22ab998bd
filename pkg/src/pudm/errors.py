class NumericError(ArithmeticError):
    """A loss, gradient or sample became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
