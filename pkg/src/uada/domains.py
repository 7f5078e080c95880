import enum


class Domain(str, enum.Enum):
    """Imaging modality. SOURCE is the densely labeled one, TARGET the sparse one."""

    SOURCE = "source"
    TARGET = "target"

    @property
    def other(self) -> "Domain":
        return Domain.TARGET if self is Domain.SOURCE else Domain.SOURCE

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown domain {value!r}; expected 'source' or 'target'") from None
