class NumericalError(Exception):
    """A computation produced an unusable numerical result"""


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, what: str, step: int | None = None):
        self.what = what
        self.step = step
        where = '' if step is None else f' at step {step}'
        msg = (
            f'{what}{where} is not positive definite, even after adding '
            'jitter to its diagonal'
        )
        super().__init__(msg)


class DivergenceError(NumericalError):
    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        self.value = value
        msg = (
            f'Optimization diverged at iteration {iteration} '
            f'(objective {value})'
        )
        super().__init__(msg)


class NonFiniteError(NumericalError):
    def __init__(self, term: str):
        self.term = term
        super().__init__(f'Non-finite value in the {term} term')


class DiffeomorphismError(NumericalError):
    def __init__(self, min_det: float, step: int | None = None):
        self.step = step
        self.min_det = min_det
        where = '' if step is None else f' at step {step}'
        msg = (
            f'Deformation{where} is not diffeomorphic '
            f'(min Jacobian determinant {min_det:.6g})'
        )
        super().__init__(msg)


class ExperimentError(NumericalError):
    def __init__(self, seed: int, cause: Exception):
        self.seed = seed
        super().__init__(f'Experiment failed for seed {seed}: {cause}')


class PreconditionError(Exception):
    """Inputs are valid, but not sufficient for the requested operation"""
