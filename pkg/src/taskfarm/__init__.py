"""Task farms over networked workers: discovery, self-scheduling, fault tolerance."""

from .client import ComputeConfig, FarmClient, TaskRepository, compute
from .protocol import Endpoint, JobSpec, ServiceDescriptor, ServiceId, Task, TaskResult
from .skeletons import Farm, NormalForm, Pipe, Seq, eval_sequential, normalize, parse

__version__ = '0.1.0'
