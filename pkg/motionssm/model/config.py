from motionssm.model.editable import Editable, ParameterDescription


class LearnerConfig(Editable):
    """Optimizer and moving-horizon settings for learning LG-SSM params

    All values are validated on construction and on `set_parameters()`.
    """

    _attrs_to_serialize = [
        'learning_rate',
        'beta1',
        'beta2',
        'epsilon',
        'max_iters',
        'grad_tol',
        'horizon',
        'inner_steps_per_sample',
        'switch_threshold',
        'adapt_transition_only',
        'seed',
    ]

    def __init__(self, **kwargs):
        super().__init__()
        params = self.default_parameters()
        params.update(kwargs)
        self.set_parameters(params)

    @classmethod
    def from_serialized(cls, d: dict):
        obj = cls()
        obj.deserialize(d)
        obj.validate_parameters(obj.get_parameters())
        return obj

    def replace(self, **kwargs) -> 'LearnerConfig':
        return LearnerConfig(**{**self.get_parameters(), **kwargs})

    def __repr__(self) -> str:
        params = self.get_parameters()
        items = ', '.join(f'{k}={v!r}' for k, v in params.items())
        return f'LearnerConfig({items})'

    def __eq__(self, other) -> bool:
        if not isinstance(other, LearnerConfig):
            return NotImplemented

        return self.get_parameters() == other.get_parameters()

    @classmethod
    def get_parameters_description(cls) -> dict[str, ParameterDescription]:
        return {
            'learning_rate': {
                'type': 'float',
                'label': 'Learning rate',
                'default': 5e-4,
                'min': 0.0,
                'exclusive_min': True,
            },
            'beta1': {
                'type': 'float',
                'label': 'First moment decay',
                'default': 0.9,
                'min': 0.0,
                'max': 1.0,
                'exclusive_max': True,
            },
            'beta2': {
                'type': 'float',
                'label': 'Second moment decay',
                'default': 0.999,
                'min': 0.0,
                'max': 1.0,
                'exclusive_max': True,
            },
            'epsilon': {
                'type': 'float',
                'label': 'Optimizer epsilon',
                'default': 1e-8,
                'min': 0.0,
                'exclusive_min': True,
            },
            'max_iters': {
                'type': 'integer',
                'label': 'Maximum iterations',
                'default': 200,
                'min': 0,
            },
            'grad_tol': {
                'type': 'float',
                'label': 'Gradient norm tolerance',
                'default': 0.0,
                'min': 0.0,
            },
            'horizon': {
                'type': 'integer',
                'label': 'Moving horizon (N)',
                'default': 75,
                'min': 2,
            },
            'inner_steps_per_sample': {
                'type': 'integer',
                'label': 'Gradient steps per sample',
                'default': 1,
                'min': 0,
            },
            'switch_threshold': {
                'type': 'float',
                'label': 'Evidence to publish adapted params (nats)',
                'default': 10.0,
                'min': 0.0,
            },
            'adapt_transition_only': {
                'type': 'boolean',
                'label': 'Adapt only the transition matrix online',
                'default': True,
            },
            'seed': {
                'type': 'integer',
                'label': 'Seed',
                'default': 0,
                'min': 0,
            },
        }
