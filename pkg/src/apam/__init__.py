"""Async-parallel adaptive stochastic gradient method (APAM).

A master applies adaptive-moment updates to gradients that workers compute
asynchronously at possibly stale parameters. The package bundles the
optimizer state machine, a deterministic staleness simulator, shared-memory
and message-passing runtimes, a convex/non-convex problem suite, and a
metrics layer that audits the method's invariants and evaluates its
convergence-rate bounds on real runs.
"""

from .optimizer import ConstOverSqrtK, HyperParams, InvSqrtK, OptimizerState, run_serial, step
from .runtime import Fixed, GradMsg, PerWorkerFixed, RunConfig, RunTrace, UniformInt, run
from .staleness import ParamHistory, ReadMeta, StalenessPolicy
from .vectormath import BoxConstraint, SparseVec

__all__ = [
    "BoxConstraint",
    "ConstOverSqrtK",
    "Fixed",
    "GradMsg",
    "HyperParams",
    "InvSqrtK",
    "OptimizerState",
    "ParamHistory",
    "PerWorkerFixed",
    "ReadMeta",
    "RunConfig",
    "RunTrace",
    "StalenessPolicy",
    "SparseVec",
    "UniformInt",
    "run",
    "run_serial",
    "step",
]

__version__ = "0.1.0"
