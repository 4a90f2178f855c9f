"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition or postcondition of a public operation was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform to a primitive's signature."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        parts = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {parts}")


class NumericFault(ArithmeticError):
    """A non-finite value appeared in a forward value or a gradient."""

    def __init__(self, where: str, detail: str = "non-finite value"):
        self.where = where
        super().__init__(f"{where}: {detail}")
