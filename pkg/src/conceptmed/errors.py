"""Exception types shared across the package."""


class ConceptMedError(Exception):
    """Base class for all package errors."""


class ShapeError(ConceptMedError, ValueError):
    pass


class SplitError(ConceptMedError, ValueError):
    pass


class ModeError(ConceptMedError, ValueError):
    """Vectorization or unit granularity incompatible with the activation."""


class DegenerateLabelsError(ConceptMedError, ValueError):
    pass


class DivergenceError(ConceptMedError, ArithmeticError):
    pass


class ConfigError(ConceptMedError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class DependencyError(ConceptMedError, RuntimeError):
    """A pipeline stage ran before the stage producing its inputs."""

    def __init__(self, stage, missing, requires):
        self.stage = stage
        self.requires = requires
        super().__init__(f"stage {stage!r} needs {missing}; run stage {requires!r} first")


class NoCounterfactualsError(ConceptMedError, ValueError):
    """No counterfactual search flipped the decision, so effects are undefined."""
