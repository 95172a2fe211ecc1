"""Exception types raised across the ECCT simulator."""


class EcctError(Exception):
    """Base class for every error raised by the simulator."""


class ShapeError(EcctError, ValueError):
    """Array dimensions do not line up (layers, packets, parameter vectors)."""


class InputError(EcctError, ValueError):
    """Input values are malformed: non-finite numbers, bad labels, empty data."""


class ConfigError(EcctError, ValueError):
    """A configuration violates an invariant of the requested run."""


class SchemaError(EcctError, ValueError):
    """A CSV file does not contain the columns the schema asks for."""


class PartitionError(EcctError, ValueError):
    """Samples could not be assigned to devices under the requested scheme."""


class StateError(EcctError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""
