"""Factor graph container and Levenberg-Marquardt optimization."""

from __future__ import annotations

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .factors import LinearizedFactor, MatchingCostFactor, RelativePoseFactor
from .linear import (
    BLOCK,
    NotPositiveDefiniteError,
    assemble_normal_equations,
    solve_block_system,
)
from .se3 import Pose

logger = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


@dataclass
class LMSettings:
    max_iterations: int = 30
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_lambda: float = 1e10
    relative_tolerance: float = 1e-6
    step_tolerance: float = 1e-8


@dataclass
class OptimizerReport:
    iterations: int = 0
    initial_error: float = 0.0
    final_error: float = 0.0
    trace: list[dict] = field(default_factory=list)
    termination: str = ""
    wall_time: float = 0.0


@dataclass
class MappingGraph:
    """Pose variables plus matching-cost and SE3 relative-pose factors.

    With ``fixed`` unset, the first variable of every connected component is
    held fixed.
    """

    poses: list[Pose] = field(default_factory=list)
    matching_factors: list[MatchingCostFactor] = field(default_factory=list)
    relative_factors: list[RelativePoseFactor] = field(default_factory=list)
    fixed: Optional[set[int]] = None

    def add_variable(self, pose: Pose) -> int:
        self.poses.append(pose)
        return len(self.poses) - 1

    @property
    def factors(self) -> list:
        return [*self.matching_factors, *self.relative_factors]

    def validate(self):
        n = len(self.poses)
        for f in self.factors:
            a, b = f.keys
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"factor references invalid variables {f.keys} (have {n})")
        if n and not self.fixed_mask().any():
            raise ValueError("graph has no fixed variable")

    def components(self) -> list[int]:
        parent = list(range(len(self.poses)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            ra, rb = find(f.keys[0]), find(f.keys[1])
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        return [find(a) for a in range(len(self.poses))]

    def fixed_mask(self) -> np.ndarray:
        n = len(self.poses)
        mask = np.zeros(n, dtype=bool)
        if self.fixed is not None:
            for v in self.fixed:
                mask[v] = True
            return mask
        seen = set()
        for v, root in enumerate(self.components()):
            if root not in seen:
                seen.add(root)
                mask[v] = True
        return mask

    def total_error(self, poses: Optional[Sequence[Pose]] = None, executor: Optional[Executor] = None) -> float:
        poses = self.poses if poses is None else poses
        return _total_error(self.factors, poses, executor)


def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _total_error(factors, poses, executor) -> float:
    errors = _map(executor, lambda f: f.error(poses), factors)
    return float(sum(errors))


def linearize_all(factors, poses, executor=None) -> list[LinearizedFactor]:
    return _map(executor, lambda f: f.linearize(poses), factors)


def optimize(
    graph: MappingGraph,
    settings: Optional[LMSettings] = None,
    executor: Optional[Executor] = None,
    trace_callback: Optional[Callable[[dict], None]] = None,
) -> tuple[list[Pose], OptimizerReport]:
    """Minimize the summed factor errors over the free poses.

    Every factor is re-linearized at each accepted estimate; a step is kept
    only if the re-evaluated total error decreases. Returns the optimized
    poses (the graph itself is not modified) and a report.
    """
    settings = settings or LMSettings()
    graph.validate()
    start = time.perf_counter()
    report = OptimizerReport()
    n = len(graph.poses)
    fixed = graph.fixed_mask()
    factors = graph.factors
    poses = list(graph.poses)

    linearized = linearize_all(factors, poses, executor)
    error = float(sum(f.error for f in linearized))
    report.initial_error = report.final_error = error
    lam = settings.initial_lambda

    def emit(rec):
        report.trace.append(rec)
        if trace_callback is not None:
            trace_callback(rec)

    emit({"iteration": 0, "error": error, "lambda": lam, "step_norm": 0.0, "accepted": True})
    if error == 0.0 or fixed.all() or not factors:
        report.termination = "already_optimal"
        report.wall_time = time.perf_counter() - start
        return poses, report

    free = [v for v in range(n) if not fixed[v]]
    termination = "max_iterations"
    for it in range(1, settings.max_iterations + 1):
        system = assemble_normal_equations(linearized, n, fixed)
        accepted = False
        while True:
            try:
                delta = solve_block_system(system.damped(lam))
            except NotPositiveDefiniteError as exc:
                lam *= settings.lambda_up
                if lam > settings.max_lambda:
                    raise OptimizationError(
                        f"linear solve failed at maximum damping ({exc}); poses left unchanged"
                    ) from exc
                continue
            step_norm = float(np.linalg.norm(delta))
            candidate = list(poses)
            for a, v in enumerate(free):
                candidate[v] = poses[v].retract(delta[BLOCK * a : BLOCK * a + BLOCK])
            new_error = _total_error(factors, candidate, executor)
            if new_error < error:
                accepted = True
                break
            emit({"iteration": it, "error": new_error, "lambda": lam, "step_norm": step_norm, "accepted": False})
            if step_norm < settings.step_tolerance:
                break
            lam *= settings.lambda_up
            if lam > settings.max_lambda:
                break

        report.iterations = it
        if not accepted:
            termination = "step_tolerance" if step_norm < settings.step_tolerance else "lambda_limit"
            break

        decrease = (error - new_error) / error if error > 0 else 0.0
        poses, error = candidate, new_error
        lam = max(lam * settings.lambda_down, 1e-12)
        emit({"iteration": it, "error": error, "lambda": lam, "step_norm": step_norm, "accepted": True})
        if decrease < settings.relative_tolerance:
            termination = "relative_tolerance"
            break
        if step_norm < settings.step_tolerance:
            termination = "step_tolerance"
            break
        linearized = linearize_all(factors, poses, executor)

    report.final_error = error
    report.termination = termination
    report.wall_time = time.perf_counter() - start
    logger.debug(
        "LM: %d iterations, error %.6g -> %.6g (%s)",
        report.iterations, report.initial_error, report.final_error, termination,
    )
    return poses, report
