"""Fixed 15-point Gauss-Kronrod rule (QUADPACK qk15 constants)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_XGK = (
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
)
_WGK = (
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def map_to(self, a, b):
        """Nodes and weights for [a, b]; a and b broadcast, nodes on the last axis."""
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        half = 0.5 * (b - a)
        return a + half * (self.nodes + 1.0), half * self.weights

    def integrate(self, f, a: float, b: float) -> float:
        x, w = self.map_to(a, b)
        return float(np.sum(w * f(x)))


def gauss_kronrod_15() -> QuadratureRule:
    x = np.asarray(_XGK)
    w = np.asarray(_WGK)
    nodes = np.concatenate([-x[:-1], x[::-1]])
    weights = np.concatenate([w[:-1], w[::-1]])
    return QuadratureRule(nodes, weights)


GK15 = gauss_kronrod_15()
