from typing import Callable, Literal, NotRequired, TypedDict, Union

import numbers

from motionssm.model.serializable import Serializable, ValidationError

Number = Union[int, float]
ParameterType = Literal['integer', 'float', 'boolean']
ParameterValue = Union[bool, Number]


class ParameterDescription(TypedDict):
    type: ParameterType
    label: str
    default: ParameterValue
    min: NotRequired[Number]
    max: NotRequired[Number]
    # Exclusive bounds, for parameters such as rates that must be > 0
    exclusive_min: NotRequired[bool]
    exclusive_max: NotRequired[bool]


ParameterValidator = Callable[[ParameterValue, ParameterDescription], None]


def _check_bounds(value: Number, description: ParameterDescription):
    minimum = description.get('min')
    if minimum is not None:
        if description.get('exclusive_min', False):
            below = value <= minimum
        else:
            below = value < minimum

        if below:
            raise ValidationError(
                f"{description['label']}: the provided value ({value}) is "
                f"below the min allowed ({minimum})."
            )

    maximum = description.get('max')
    if maximum is not None:
        if description.get('exclusive_max', False):
            above = value >= maximum
        else:
            above = value > maximum

        if above:
            raise ValidationError(
                f"{description['label']}: the provided value ({value}) is "
                f"above the max allowed ({maximum})."
            )


def validate_float(value, description: ParameterDescription):
    valid = isinstance(value, numbers.Real) and not isinstance(value, bool)
    # NaN compares unequal to itself
    if not valid or value != value:
        raise ValidationError(
            f"{description['label']}: the provided value is not a number."
        )

    _check_bounds(value, description)


def validate_integer(value, description: ParameterDescription):
    valid = isinstance(value, numbers.Integral) and not isinstance(
        value, bool
    )
    if not valid:
        raise ValidationError(
            f"{description['label']}: the provided value is not an integer."
        )

    _check_bounds(value, description)


def validate_boolean(value, description: ParameterDescription):
    if not isinstance(value, bool):
        raise ValidationError(
            f"{description['label']}: the provided value is not a boolean."
        )


VALIDATORS: dict[ParameterType, ParameterValidator] = {
    'integer': validate_integer,
    'float': validate_float,
    'boolean': validate_boolean,
}


class Editable(Serializable):
    """A set of typed, bounded parameters that are validated together

    Subclasses describe their parameters in
    `get_parameters_description()` and store each one as an attribute
    of the same name.
    """

    @classmethod
    def get_parameters_description(cls) -> dict[str, ParameterDescription]:
        raise NotImplementedError

    @classmethod
    def default_parameters(cls) -> dict[str, ParameterValue]:
        return {
            k: v['default']
            for k, v in cls.get_parameters_description().items()
        }

    def get_parameters(self) -> dict[str, ParameterValue]:
        return {k: getattr(self, k) for k in self.get_parameters_description()}

    def set_parameters(self, params: dict, validate: bool = True):
        # Partial updates are merged over the current values.
        # Nothing is committed unless every merged value is valid.
        unknown = set(params) - set(self.get_parameters_description())
        if unknown:
            msg = f'Unknown parameter(s): {sorted(unknown)}'
            raise ValidationError(msg)

        if validate:
            current = {
                k: getattr(self, k)
                for k in self.get_parameters_description()
                if hasattr(self, k)
            }
            self.validate_parameters({**current, **params})

        for k, v in params.items():
            setattr(self, k, v)

    @classmethod
    def validate_parameters(cls, params: dict):
        for k, description in cls.get_parameters_description().items():
            if k not in params:
                raise ValidationError(f'Parameter {k} is missing')

            VALIDATORS[description['type']](params[k], description)
