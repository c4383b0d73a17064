"""Fixed-step backward integrators and grid quadrature.

Everything here is deterministic and reproducible: classical RK4 stepping
node-to-node on the spec grid, and cumulative backward Simpson quadrature
(exact on the piecewise-linear coefficients because their breakpoints are
forced onto grid nodes).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericalError
from .model import TimeGrid


class CumInt:
    """Backward cumulative integral I(s) = int_s^T f(v) dv on a grid.

    Node values use one Simpson panel per interval (order 4, exact for
    polynomials of degree <= 3 on each interval).  Calling the object at an
    arbitrary s adds a local Simpson correction inside s's interval, so the
    integral of piecewise-linear coefficients is exact everywhere, which the
    RK4 right-hand sides rely on at half steps.
    """

    def __init__(self, f: Callable[[np.ndarray], np.ndarray], grid: TimeGrid):
        self.f = f
        self.grid = grid
        nodes = grid.nodes
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        fn = np.asarray(f(nodes), dtype=float)
        fm = np.asarray(f(mids), dtype=float)
        dt = np.diff(nodes)
        seg = dt / 6.0 * (fn[:-1] + 4.0 * fm + fn[1:])
        vals = np.zeros(nodes.size)
        vals[:-1] = np.cumsum(seg[::-1])[::-1]
        self.node_values = vals
        self._nodes = nodes

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        scalar_in = s.ndim == 0
        ss = np.atleast_1d(s)
        nodes = self._nodes
        if np.any(ss < nodes[0] - 1e-12) or np.any(ss > nodes[-1] + 1e-12):
            raise ValueError("integration point outside the grid span")
        sc = np.clip(ss, nodes[0], nodes[-1])
        idx = np.clip(np.searchsorted(nodes, sc, side="right") - 1, 0, nodes.size - 2)
        t1 = nodes[idx + 1]
        width = t1 - sc
        mid = 0.5 * (sc + t1)
        local = width / 6.0 * (self.f(sc) + 4.0 * self.f(mid) + self.f(t1))
        out = self.node_values[idx + 1] + local
        # Exact node hits return the precomputed value bit-for-bit.
        exact = width <= 0.0
        if np.any(exact):
            out = np.where(exact, self.node_values[idx + 1], out)
        on_node = np.isclose(sc, nodes[idx], rtol=0.0, atol=0.0)
        if np.any(on_node):
            out = np.where(on_node, self.node_values[idx], out)
        return float(out[0]) if scalar_in else out


def rk4_backward(rhs: Callable[[float, np.ndarray], np.ndarray],
                 grid: TimeGrid,
                 terminal: np.ndarray,
                 label: str = "ode") -> np.ndarray:
    """Integrate dy/ds = rhs(s, y) backward from (T, terminal) to 0.

    Returns the path on grid nodes, shape (steps+1,) + terminal.shape, with
    the terminal row set bit-exactly to `terminal`.  Raises NumericalError
    as soon as the state stops being finite.
    """
    y = np.array(terminal, dtype=float)
    out = np.empty((grid.steps + 1,) + y.shape)
    out[-1] = y
    nodes = grid.nodes
    for i in range(grid.steps, 0, -1):
        t1 = nodes[i]
        hstep = t1 - nodes[i - 1]
        k1 = rhs(t1, y)
        k2 = rhs(t1 - 0.5 * hstep, y - 0.5 * hstep * k1)
        k3 = rhs(t1 - 0.5 * hstep, y - 0.5 * hstep * k2)
        k4 = rhs(t1 - hstep, y - hstep * k3)
        y = y - hstep / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite state in {label} at step {i - 1}")
        out[i - 1] = y
    return out


def trapezoid_nodes(values: np.ndarray, nodes: np.ndarray) -> float:
    """Plain trapezoid of node samples (running-cost quadrature)."""
    dt = np.diff(nodes)
    return float(np.sum(0.5 * dt * (values[:-1] + values[1:])))
