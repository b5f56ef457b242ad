import numpy as np


class ValidationError(Exception):
    pass


class Serializable:
    """Round trip through a dict of JSON-compatible values

    Subclasses list the attributes to round trip, in order, in
    `_attrs_to_serialize`. Array attributes are written as nested lists,
    so `json.dump(obj.serialize())` always works.

    Classes that are built in one step (such as frozen dataclasses)
    override `from_serialized()` and call `check_serialized_keys()`
    with `require_all=True`.
    """

    _attrs_to_serialize: list[str] = []

    def serialize(self) -> dict:
        out = {}
        for k in self._attrs_to_serialize:
            value = getattr(self, k)
            if isinstance(value, np.ndarray):
                value = value.tolist()

            out[k] = value

        return out

    @classmethod
    def check_serialized_keys(cls, d: dict, require_all: bool = False):
        unknown = [k for k in d if k not in cls._attrs_to_serialize]
        if unknown:
            msg = f'Unknown attribute(s) provided to deserializer: {unknown}'
            raise ValidationError(msg)

        missing = [k for k in cls._attrs_to_serialize if k not in d]
        if require_all and missing:
            msg = f'Missing serialized attribute(s): {missing}'
            raise ValidationError(msg)

    def deserialize(self, d: dict):
        # Partial dicts update only the attributes they name
        self.check_serialized_keys(d)
        for k, v in d.items():
            setattr(self, k, v)

    @classmethod
    def from_serialized(cls, d: dict):
        obj = cls()
        obj.deserialize(d)
        return obj
