"""Exception hierarchy shared by every taskfarm component."""


class TaskFarmError(Exception):
    """Base class for all taskfarm errors."""


# -- wire protocol --------------------------------------------------------

class Incomplete(Exception):
    """More bytes are needed before a frame can be decoded.

    Not a TaskFarmError: callers are expected to buffer and retry.
    """


class ProtocolError(TaskFarmError):
    pass


class MalformedFrame(ProtocolError):
    pass


class OversizedMessage(ProtocolError):
    pass


# -- skeletons ------------------------------------------------------------

class SkeletonError(TaskFarmError):
    pass


class EmptyExpression(SkeletonError):
    pass


class SkeletonSyntaxError(SkeletonError):
    pass


class UnknownProcessor(TaskFarmError):
    def __init__(self, name):
        super().__init__('unknown processor: %r' % (name,))
        self.name = name


# -- registry -------------------------------------------------------------

class RegistryError(TaskFarmError):
    pass


class InvalidLease(RegistryError):
    pass


class MalformedDescriptor(RegistryError):
    pass


class UnknownService(RegistryError):
    pass


class RegistryUnreachable(TaskFarmError):
    pass


# -- worker / client ------------------------------------------------------

class ProcessorPanic(TaskFarmError):
    """A processor stage raised while computing a task."""


class ConnectionClosed(TaskFarmError):
    """The peer closed the connection (or it was reset)."""


class NoServicesAvailable(TaskFarmError):
    pass


class TaskFailed(TaskFarmError):
    def __init__(self, task_id, retries):
        super().__init__('task %d failed after %d reschedules' % (task_id, retries))
        self.task_id = task_id
        self.retries = retries


class SimulationDeadlock(TaskFarmError):
    """The virtual-time loop has nothing runnable and no pending timers."""
