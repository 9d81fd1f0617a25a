"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Input length or shape does not match what the model expects."""


class MalformedTreeError(ValueError):
    """A tree violates a structural invariant (e.g. an empty leaf region)."""


class ForestFormatError(ValueError):
    """A serialized forest document does not conform to the schema.

    ``node`` holds a path-like identifier of the offending node, e.g.
    ``trees[0]/R/L`` for the left child of the right child of tree 0's root.
    """

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"{node}: {message}"
        super().__init__(message)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or activation."""

