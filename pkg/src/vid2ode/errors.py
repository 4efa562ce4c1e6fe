"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all vid2ode failures."""


class SimulationDivergedError(PipelineError):
    def __init__(self, step, detail=""):
        self.step = step
        super().__init__(f"simulation diverged (non-finite state) at step {step}{': ' + detail if detail else ''}")


class OutOfFrameError(PipelineError):
    """Sprite window would leave the frame during rendering."""


class InitializationFailedError(PipelineError):
    def __init__(self, frame_index, detail=""):
        self.frame_index = frame_index
        super().__init__(f"object initialization failed at frame {frame_index}{': ' + detail if detail else ''}")


class LowConfidenceError(PipelineError):
    """Correlation surface too flat to localize an object."""


class EmptyEquationError(PipelineError):
    def __init__(self, equation, detail=""):
        self.equation = equation
        super().__init__(f"state equation {equation!r} has no active terms and no input{': ' + detail if detail else ''}")


class IllConditionedError(PipelineError):
    def __init__(self, columns, cond):
        self.columns = list(columns)
        self.cond = cond
        super().__init__(f"active library columns {self.columns} are rank deficient (cond={cond:.3g})")


class DegenerateSeriesError(PipelineError):
    """Affine alignment attempted against a constant estimate series."""


class InexpressibleTruthError(PipelineError):
    """The candidate library cannot represent the generating equation."""


class TooShortError(PipelineError):
    """Not enough samples for the requested finite-difference stencil."""
