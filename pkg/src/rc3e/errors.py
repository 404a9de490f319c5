"""Exception hierarchy shared by every layer.

Each class carries a stable ``code`` string so the wire protocol and the CLI
can report failures without leaking Python class names.  Raising sites pick
the class; messages are free-form.
"""


class Rc3eError(Exception):
    """Base class for all service errors."""

    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


# --- fleet / device database ------------------------------------------------

class DuplicateHostname(Rc3eError):
    code = "duplicate_hostname"


class UnknownNode(Rc3eError):
    code = "unknown_node"


class UnknownDevice(Rc3eError):
    code = "unknown_device"


class NodeFull(Rc3eError):
    code = "node_full"


class DeviceDbIoError(Rc3eError):
    code = "io_error"


class SchemaVersionMismatch(Rc3eError):
    code = "schema_version_mismatch"


# --- hypervisor / placement ---------------------------------------------------

class NoCapacity(Rc3eError):
    code = "no_capacity"


class ModelConflict(Rc3eError):
    # capacity exists but is locked behind an incompatible service model
    code = "model_conflict"


class UnknownLease(Rc3eError):
    code = "unknown_lease"


class WrongServiceModel(Rc3eError):
    code = "wrong_service_model"


class FootprintTooLarge(Rc3eError):
    code = "footprint_too_large"


class RegionMismatch(Rc3eError):
    code = "region_mismatch"


class InvalidBitfile(Rc3eError):
    code = "invalid_bitfile"


class UnknownJob(Rc3eError):
    code = "unknown_job"


class UnknownService(Rc3eError):
    code = "unknown_service"


# --- runtime access ----------------------------------------------------------

class PermissionDenied(Rc3eError):
    code = "permission_denied"


class OutOfRange(Rc3eError):
    code = "out_of_range"


class WrongDirection(Rc3eError):
    code = "wrong_direction"


class NotConfigured(Rc3eError):
    code = "not_configured"


class UnknownEndpoint(Rc3eError):
    code = "unknown_endpoint"


# --- kernels -------------------------------------------------------------------

class MalformedFrame(Rc3eError):
    code = "malformed_frame"


class DimensionMismatch(Rc3eError):
    code = "dimension_mismatch"


class NoPreset(Rc3eError):
    code = "no_preset"


class UnknownKernelKind(Rc3eError):
    code = "unknown_kind"


# --- clock / scheduling --------------------------------------------------------

class EmptyQueueBeforePredicate(Rc3eError):
    # the event queue drained before the waited-on condition became true
    code = "empty_queue"


class UnknownLatencyKind(Rc3eError):
    code = "unknown_latency_kind"


# --- middleware ------------------------------------------------------------------

class BadRequest(Rc3eError):
    code = "bad_request"


class UnknownCommand(Rc3eError):
    code = "unknown_cmd"


class ConfigError(Rc3eError):
    code = "config_error"


class RemoteError(Rc3eError):
    """Client-side mirror of an error the service returned over the wire."""

    code = "remote_error"

    def __init__(self, code: str, message: str = ""):
        super().__init__(message)
        self.code = code


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, Rc3eError) and cls is not RemoteError
}


def from_code(code: str, message: str = "") -> Rc3eError:
    """Rebuild a typed error from a wire ``{code, message}`` pair."""
    cls = _BY_CODE.get(code)
    if cls is None:
        return RemoteError(code, message)
    return cls(message)
