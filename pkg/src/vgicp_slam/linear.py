"""Block-sparse normal equations and their Cholesky solution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

BLOCK = 6


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, variable: int):
        super().__init__(f"non-positive-definite pivot at variable {variable}")
        self.variable = variable


@dataclass
class BlockSystem:
    """Symmetric system over free variables, stored as lower 6x6 blocks.

    ``variables[a]`` is the graph index of block row ``a``; ``blocks`` maps
    ``(a, b)`` with ``a >= b`` to ``H[a, b]``.
    """

    variables: list[int]
    blocks: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    rhs: np.ndarray = None

    def __post_init__(self):
        if self.rhs is None:
            self.rhs = np.zeros(BLOCK * len(self.variables))

    @property
    def size(self) -> int:
        return len(self.variables)

    def add(self, a: int, b: int, block: np.ndarray):
        if a < b:
            a, b, block = b, a, block.T
        cur = self.blocks.get((a, b))
        self.blocks[(a, b)] = block.copy() if cur is None else cur + block

    def dense(self) -> np.ndarray:
        n = self.size
        H = np.zeros((BLOCK * n, BLOCK * n))
        for (a, b), B in self.blocks.items():
            H[BLOCK * a : BLOCK * a + BLOCK, BLOCK * b : BLOCK * b + BLOCK] = B
            if a != b:
                H[BLOCK * b : BLOCK * b + BLOCK, BLOCK * a : BLOCK * a + BLOCK] = B.T
        return H

    def damped(self, lam: float, floor: float = 1e-9) -> "BlockSystem":
        """Copy with ``lam * diag(H)`` added (diagonal floored at ``floor``)."""
        out = BlockSystem(list(self.variables), dict(self.blocks), self.rhs.copy())
        for a in range(self.size):
            D = out.blocks.get((a, a), np.zeros((BLOCK, BLOCK)))
            out.blocks[(a, a)] = D + lam * np.diag(np.maximum(np.diag(D), floor))
        return out

    def adjacency(self) -> set[tuple[int, int]]:
        return {(a, b) for (a, b) in self.blocks if a != b}


def assemble_normal_equations(linearized: Iterable, num_variables: int, fixed: Sequence[bool]) -> BlockSystem:
    """Scatter-add linearized factors into a block system over free variables.

    Fixed variables are eliminated by dropping their rows and columns.
    """
    fixed = np.asarray(fixed, dtype=bool)
    free = [v for v in range(num_variables) if not fixed[v]]
    pos = {v: a for a, v in enumerate(free)}
    system = BlockSystem(free)
    for a in range(len(free)):
        system.blocks[(a, a)] = np.zeros((BLOCK, BLOCK))
    for f in linearized:
        pi, pj = pos.get(f.i), pos.get(f.j)
        if pi is not None:
            system.add(pi, pi, f.H_ii)
            system.rhs[BLOCK * pi : BLOCK * pi + BLOCK] += f.b_i
        if pj is not None:
            system.add(pj, pj, f.H_jj)
            system.rhs[BLOCK * pj : BLOCK * pj + BLOCK] += f.b_j
        if pi is not None and pj is not None:
            # H_ij sits at row i, column j
            system.add(pi, pj, f.H_ij)
    return system


def solve_block_system(system: BlockSystem) -> np.ndarray:
    """Solve ``H x = rhs`` by sparse block Cholesky.

    Variables are eliminated in reverse insertion order; fill-in blocks are
    created as needed. Raises ``NotPositiveDefiniteError`` naming the graph
    variable whose pivot failed.
    """
    m = system.size
    if m == 0:
        return np.zeros(0)
    order = list(range(m - 1, -1, -1))
    pos = {a: k for k, a in enumerate(order)}

    cols: list[dict[int, np.ndarray]] = [dict() for _ in range(m)]
    for (a, b), B in system.blocks.items():
        pa, pb = pos[a], pos[b]
        if pa >= pb:
            cols[pb][pa] = B.copy()
        else:
            cols[pa][pb] = B.T.copy()

    for j in range(m):
        col = cols[j]
        D = col.pop(j, np.zeros((BLOCK, BLOCK)))
        try:
            Ljj = np.linalg.cholesky(0.5 * (D + D.T))
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(system.variables[order[j]]) from None
        rows = sorted(col)
        for i in rows:
            col[i] = solve_triangular(Ljj, col[i].T, lower=True).T
        for ai, i in enumerate(rows):
            Li = col[i]
            target = cols[i]
            for k in rows[ai:]:
                upd = col[k] @ Li.T
                cur = target.get(k)
                target[k] = -upd if cur is None else cur - upd
        col[j] = Ljj

    rhs = np.empty(BLOCK * m)
    for k, a in enumerate(order):
        rhs[BLOCK * k : BLOCK * k + BLOCK] = system.rhs[BLOCK * a : BLOCK * a + BLOCK]

    y = rhs.copy()
    for j in range(m):
        sl = slice(BLOCK * j, BLOCK * j + BLOCK)
        y[sl] = solve_triangular(cols[j][j], y[sl], lower=True)
        for i, L in cols[j].items():
            if i != j:
                y[BLOCK * i : BLOCK * i + BLOCK] -= L @ y[sl]
    x = y
    for j in range(m - 1, -1, -1):
        sl = slice(BLOCK * j, BLOCK * j + BLOCK)
        acc = x[sl].copy()
        for i, L in cols[j].items():
            if i != j:
                acc -= L.T @ x[BLOCK * i : BLOCK * i + BLOCK]
        x[sl] = solve_triangular(cols[j][j], acc, lower=True, trans="T")

    out = np.empty(BLOCK * m)
    for k, a in enumerate(order):
        out[BLOCK * a : BLOCK * a + BLOCK] = x[BLOCK * k : BLOCK * k + BLOCK]
    return out
