"""Affine-parametric diffusion coefficients a(x, y) = psi0(x) + sum_j y_j psi_j(x).

The parameter vector y lives in the centered unit cube [-1/2, 1/2]^s.  Each
mode carries its value and spatial gradient plus sup-norm data used for the
weight sequences b_j = ||psi_j||_inf / kappa and b'_j = ||psi_j||_{W^{1,inf}}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PointFunc = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Mode:
    """One spatial mode: value, gradient and sup-norm bounds.

    ``value`` maps an (n, 2) array of points to an (n,) array; ``gradient``
    maps it to an (n, 2) array.
    """

    value: PointFunc
    gradient: PointFunc
    sup_norm: float
    w1inf_norm: float


def constant_mode(c: float) -> Mode:
    return Mode(
        value=lambda x, c=c: np.full(x.shape[0], c),
        gradient=lambda x: np.zeros((x.shape[0], 2)),
        sup_norm=abs(c),
        w1inf_norm=abs(c),
    )


@dataclass(frozen=True)
class AffineCoefficient:
    """Affine-parametric coefficient with positivity and summability checks.

    Construction validates ess-inf psi0 > kappa > 0 by sampling psi0 on a
    ``check_grid`` x ``check_grid`` grid of the unit square (the sampling
    density and margin are recorded), and enforces sum_j b_j < 2.

    ``matrix_builder`` and ``gradient_matrix_builder`` are optional fast
    paths returning all mode values (n, s) resp. gradients (n, s, 2) in one
    call; families with shared structure (sine modes) supply them.
    """

    psi0: Mode
    modes: tuple[Mode, ...]
    kappa: float
    check_grid: int = 64
    psi0_min_sampled: float = field(default=0.0, compare=False)
    matrix_builder: Optional[Callable[[np.ndarray], np.ndarray]] = field(
        default=None, compare=False
    )
    gradient_matrix_builder: Optional[Callable[[np.ndarray], np.ndarray]] = field(
        default=None, compare=False
    )
    value_impl: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, compare=False
    )
    gradient_impl: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, compare=False
    )

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        pts = _grid_points(self.check_grid)
        p0 = np.min(self.psi0.value(pts))
        object.__setattr__(self, "psi0_min_sampled", float(p0))
        if not p0 > self.kappa:
            raise ValueError(
                f"sampled min of psi0 ({p0:.6g}) does not exceed kappa ({self.kappa:.6g})"
            )
        if not np.sum(self.b_seq) < 2.0:
            raise ValueError("mode amplitude condition violated: sum b_j >= 2")

    @property
    def dimension(self) -> int:
        return len(self.modes)

    @property
    def b_seq(self) -> np.ndarray:
        """b_j = ||psi_j||_inf / kappa."""
        return np.array([m.sup_norm for m in self.modes]) / self.kappa

    @property
    def bprime_seq(self) -> np.ndarray:
        """b'_j = ||psi_j||_{W^{1,inf}}."""
        return np.array([m.w1inf_norm for m in self.modes])

    def _check_y(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dimension,):
            raise ValueError(f"parameter vector must have length {self.dimension}")
        if np.any(np.abs(y) > 0.5 + 1e-14):
            raise ValueError("parameter vector outside [-1/2, 1/2]^s")
        return y

    def modes_matrix(self, x: np.ndarray) -> np.ndarray:
        """(n, s) values of all modes at an (n, 2) array of points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.matrix_builder is not None:
            return self.matrix_builder(x)
        if not self.modes:
            return np.zeros((x.shape[0], 0))
        return np.column_stack([m.value(x) for m in self.modes])

    def modes_gradient_matrix(self, x: np.ndarray) -> np.ndarray:
        """(n, s, 2) spatial gradients of all modes at an (n, 2) array."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.gradient_matrix_builder is not None:
            return self.gradient_matrix_builder(x)
        out = np.zeros((x.shape[0], len(self.modes), 2))
        for j, m in enumerate(self.modes):
            out[:, j, :] = m.gradient(x)
        return out

    def value(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """a(x, y) at an (n, 2) array of points; returns (n,)."""
        y = self._check_y(y)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.value_impl is not None:
            return self.value_impl(x, y)
        out = self.psi0.value(x).astype(float).copy()
        if y.size and np.any(y != 0.0):
            out += self.modes_matrix(x) @ y
        return out

    def gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Spatial gradient of a(., y) at an (n, 2) array of points; (n, 2)."""
        y = self._check_y(y)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.gradient_impl is not None:
            return self.gradient_impl(x, y)
        out = self.psi0.gradient(x).astype(float).copy()
        if y.size and np.any(y != 0.0):
            out += np.einsum("nsd,s->nd", self.modes_gradient_matrix(x), y)
        return out

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Value and spatial gradient of a(., y)."""
        return self.value(x, y), self.gradient(x, y)


def _grid_points(n: int) -> np.ndarray:
    s = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(s, s)
    return np.column_stack([xx.ravel(), yy.ravel()])


def sine_frequency_pairs(count: int) -> list[tuple[int, int]]:
    """First ``count`` pairs of N^2 ordered by k1^2 + k2^2, ties lexicographic."""
    kmax = int(np.ceil(np.sqrt(count))) + 2
    while True:
        pairs = [(k1, k2) for k1 in range(1, kmax + 1) for k2 in range(1, kmax + 1)]
        pairs.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, p[0], p[1]))
        # guard: the cut-off square must contain the first `count` shells
        if pairs[count - 1][0] ** 2 + pairs[count - 1][1] ** 2 <= kmax**2 + 1:
            return pairs[:count]
        kmax += 2


def _sine_mode(k1: int, k2: int) -> Mode:
    amp = 1.0 / (k1**2 + k2**2) ** 2

    def value(x, k1=k1, k2=k2, amp=amp):
        return amp * np.sin(k1 * x[:, 0]) * np.sin(k2 * x[:, 1])

    def gradient(x, k1=k1, k2=k2, amp=amp):
        g = np.empty((x.shape[0], 2))
        g[:, 0] = amp * k1 * np.cos(k1 * x[:, 0]) * np.sin(k2 * x[:, 1])
        g[:, 1] = amp * k2 * np.sin(k1 * x[:, 0]) * np.cos(k2 * x[:, 1])
        return g

    # Amplitude bound |sin| <= 1; the W^{1,inf} bound gains a factor max(k1, k2).
    return Mode(value=value, gradient=gradient, sup_norm=amp, w1inf_norm=amp * max(k1, k2))


def _sincos_tables(x: np.ndarray, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    """sin(k x) and cos(k x) for k = 1..kmax via the angle-addition recurrence.

    Two trig evaluations per point regardless of kmax.
    """
    s = np.empty((kmax, x.size))
    c = np.empty((kmax, x.size))
    s[0] = np.sin(x)
    c[0] = np.cos(x)
    two_c = 2.0 * c[0]
    for k in range(1, kmax):
        if k == 1:
            s[1] = two_c * s[0]
            c[1] = two_c * c[0] - 1.0
        else:
            s[k] = two_c * s[k - 1] - s[k - 2]
            c[k] = two_c * c[k - 1] - c[k - 2]
    return s, c


def _sine_family_builders(pairs):
    kmax = max(max(k1, k2) for k1, k2 in pairs)
    amps = np.array([1.0 / (k1**2 + k2**2) ** 2 for k1, k2 in pairs])
    k1s = np.array([p[0] - 1 for p in pairs])
    k2s = np.array([p[1] - 1 for p in pairs])

    def matrix(x):
        s1, _ = _sincos_tables(x[:, 0], kmax)
        s2, _ = _sincos_tables(x[:, 1], kmax)
        return (amps[None, :] * s1[k1s].T * s2[k2s].T)

    def gradient_matrix(x):
        s1, c1 = _sincos_tables(x[:, 0], kmax)
        s2, c2 = _sincos_tables(x[:, 1], kmax)
        out = np.empty((x.shape[0], len(pairs), 2))
        out[:, :, 0] = (amps * (k1s + 1))[None, :] * c1[k1s].T * s2[k2s].T
        out[:, :, 1] = (amps * (k2s + 1))[None, :] * s1[k1s].T * c2[k2s].T
        return out

    def combined_value(x, y, psi0_value):
        s1, _ = _sincos_tables(x[:, 0], kmax)
        s2, _ = _sincos_tables(x[:, 1], kmax)
        acc = np.full(x.shape[0], psi0_value)
        weights = amps * y
        for j in range(len(pairs)):
            if weights[j] != 0.0:
                acc += weights[j] * (s1[k1s[j]] * s2[k2s[j]])
        return acc

    def combined_gradient(x, y):
        s1, c1 = _sincos_tables(x[:, 0], kmax)
        s2, c2 = _sincos_tables(x[:, 1], kmax)
        gx = np.zeros(x.shape[0])
        gy = np.zeros(x.shape[0])
        wx = amps * (k1s + 1) * y
        wy = amps * (k2s + 1) * y
        for j in range(len(pairs)):
            if y[j] != 0.0:
                gx += wx[j] * (c1[k1s[j]] * s2[k2s[j]])
                gy += wy[j] * (s1[k1s[j]] * c2[k2s[j]])
        return np.column_stack([gx, gy])

    return matrix, gradient_matrix, combined_value, combined_gradient


def sine_modes(count: int = 16, kappa: float = 0.25, psi0_value: float = 0.5) -> AffineCoefficient:
    """Sine-mode coefficient on (0,1)^2 with analytically known bounds.

    psi0 is the constant ``psi0_value`` and mode j is
    sin(k_{j,1} x1) sin(k_{j,2} x2) / (k_{j,1}^2 + k_{j,2}^2)^2 with the
    frequency pairs enumerated by ascending k1^2 + k2^2 (ties broken
    lexicographically).  Defaults give the 16-mode instance with kappa = 1/4.
    """
    pairs = sine_frequency_pairs(count)
    modes = tuple(_sine_mode(k1, k2) for k1, k2 in pairs)
    matrix, gradient_matrix, cvalue, cgrad = _sine_family_builders(pairs)
    return AffineCoefficient(
        psi0=constant_mode(psi0_value),
        modes=modes,
        kappa=kappa,
        matrix_builder=matrix,
        gradient_matrix_builder=gradient_matrix,
        value_impl=lambda x, y: cvalue(x, y, psi0_value),
        gradient_impl=cgrad,
    )


def sine_modes_16() -> AffineCoefficient:
    """The 16-mode sine coefficient instance with psi0 = 1/2 and kappa = 1/4."""
    return sine_modes(16)


def constant_coefficient(value: float = 1.0) -> AffineCoefficient:
    """Parameter-independent coefficient a = value (no modes)."""
    return AffineCoefficient(
        psi0=constant_mode(value), modes=(), kappa=value / 2.0
    )


@dataclass(frozen=True)
class _RectMode:
    x0: float
    x1: float
    y0: float
    y1: float
    amplitude: float

    def as_mode(self) -> Mode:
        def value(x):
            inside = (
                (x[:, 0] >= self.x0)
                & (x[:, 0] <= self.x1)
                & (x[:, 1] >= self.y0)
                & (x[:, 1] <= self.y1)
            )
            return np.where(inside, self.amplitude, 0.0)

        return Mode(
            value=value,
            gradient=lambda x: np.zeros((x.shape[0], 2)),
            sup_norm=abs(self.amplitude),
            w1inf_norm=abs(self.amplitude),
        )


def estimate_mode_norms(value: PointFunc, gradient: PointFunc, grid: int = 256) -> tuple[float, float]:
    """Sup-norm estimates for a user-supplied mode by grid sampling.

    Samples cell midpoints of a ``grid`` x ``grid`` partition of the unit
    square; adequate for modes whose variation is resolved at that density.
    """
    pts = _grid_points(grid)
    sup = float(np.max(np.abs(value(pts))))
    g = gradient(pts)
    w1 = max(sup, float(np.max(np.abs(g))))
    return sup, w1


def coefficient_from_config(spec: str, kappa: float = 0.25) -> AffineCoefficient:
    """Build a coefficient from a flat config string.

    Supported forms:

    - ``sine16``                      the 16-mode default instance
    - ``sine:<count>``                sine family with ``count`` modes
    - ``piecewise:<x0,x1,y0,y1,amp>[;...]`` constant-on-rectangle modes with
      psi0 = 1/2 (rectangles should be resolved by the mesh for the residual
      estimators to be meaningful)
    """
    spec = spec.strip()
    if spec == "sine16":
        return sine_modes(16, kappa=kappa)
    if spec.startswith("sine:"):
        return sine_modes(int(spec.split(":", 1)[1]), kappa=kappa)
    if spec.startswith("piecewise:"):
        body = spec.split(":", 1)[1]
        modes = []
        for part in body.split(";"):
            vals = [float(v) for v in part.split(",")]
            if len(vals) != 5:
                raise ValueError("piecewise mode needs x0,x1,y0,y1,amplitude")
            modes.append(_RectMode(*vals).as_mode())
        return AffineCoefficient(psi0=constant_mode(0.5), modes=tuple(modes), kappa=kappa)
    raise ValueError(f"unknown coefficient spec: {spec!r}")
