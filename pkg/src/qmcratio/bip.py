"""Bayesian inverse problem front end: observations, likelihood and FE bounds.

Observation functionals are scaled rectangle averages of the P1 solution,
integrated exactly by clipping each element against the rectangle.  The
Gaussian likelihood exp(-|data - obs|_Gamma^2 / 2) is evaluated through a
Cholesky factorization of the noise covariance.  Per-sample bounds transfer
the residual estimator into bounds on the likelihood and on the
goal-weighted likelihood, which average into the aggregates consumed by the
ratio machinery.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import fem
from .coefficient import AffineCoefficient
from .fem import FieldSolution, ResidualBreakdown, StiffnessSystem
from .mesh import TriangleMesh

#: Bundled synthetic observation data for the reference four-sensor setup.
BUNDLED_DATA = np.array([0.5205, 0.5037, 0.5443, 0.4609])


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle [x0, x1] x [y0, y1]."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("rectangle must have positive extent")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def intersection_area(self, other: "Rectangle") -> float:
        dx = min(self.x1, other.x1) - max(self.x0, other.x0)
        dy = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(dx, 0.0) * max(dy, 0.0)


def default_sensor_rectangles() -> list[Rectangle]:
    """The four corner sensor patches of the reference setup."""
    return [
        Rectangle(0.1, 0.2, 0.1, 0.2),
        Rectangle(0.1, 0.2, 0.8, 0.9),
        Rectangle(0.8, 0.9, 0.1, 0.2),
        Rectangle(0.8, 0.9, 0.8, 0.9),
    ]


def _clip_polygon_halfplane(poly, inside, crossing):
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cin, nin = inside(cur), inside(nxt)
        if cin:
            out.append(cur)
            if not nin:
                out.append(crossing(cur, nxt))
        elif nin:
            out.append(crossing(cur, nxt))
    return out


def _clip_triangle_to_rect(pts: np.ndarray, rect: Rectangle) -> list[np.ndarray]:
    poly = [pts[0], pts[1], pts[2]]
    for axis, bound, keep_ge in (
        (0, rect.x0, True),
        (0, rect.x1, False),
        (1, rect.y0, True),
        (1, rect.y1, False),
    ):
        if not poly:
            return []

        def inside(p, axis=axis, bound=bound, keep_ge=keep_ge):
            return p[axis] >= bound if keep_ge else p[axis] <= bound

        def crossing(p, q, axis=axis, bound=bound):
            t = (bound - p[axis]) / (q[axis] - p[axis])
            return p + t * (q - p)

        poly = _clip_polygon_halfplane(poly, inside, crossing)
    return poly


def hat_integrals_over_rectangle(mesh: TriangleMesh, rect: Rectangle) -> np.ndarray:
    """(nv,) vector of integrals of each hat function over the rectangle.

    Exact for P1 fields: within each element the field is a single linear
    function, and the clipped region is a convex polygon integrated by fan
    triangulation (a linear function integrates to area times vertex mean).
    """
    verts = mesh.vertices
    out = np.zeros(mesh.num_vertices)
    tri_pts = verts[mesh.triangles]
    mins = tri_pts.min(axis=1)
    maxs = tri_pts.max(axis=1)
    cand = np.flatnonzero(
        (mins[:, 0] < rect.x1)
        & (maxs[:, 0] > rect.x0)
        & (mins[:, 1] < rect.y1)
        & (maxs[:, 1] > rect.y0)
    )
    for t in cand:
        pts = tri_pts[t]
        poly = _clip_triangle_to_rect(pts, rect)
        if len(poly) < 3:
            continue
        # barycentric coordinates of the polygon vertices within the element
        mat = np.column_stack([pts[1] - pts[0], pts[2] - pts[0]])
        inv = np.linalg.inv(mat)
        local = np.array([inv @ (p - pts[0]) for p in poly])
        bary = np.column_stack([1.0 - local[:, 0] - local[:, 1], local])
        p0, b0 = poly[0], bary[0]
        for i in range(1, len(poly) - 1):
            p1, p2 = poly[i], poly[i + 1]
            area = 0.5 * abs(
                (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
            )
            if area <= 0:
                continue
            mean_bary = (b0 + bary[i] + bary[i + 1]) / 3.0
            out[mesh.triangles[t]] += area * mean_bary
    return out


@dataclass(frozen=True, eq=False)
class ObservationSetup:
    """Sensor functionals, noise covariance, data and goal functional.

    Each observation is scale * integral over its rectangle; the goal
    functional has the same form.  ``variant`` selects which residual
    estimator/norm pairing the per-sample bounds use: "l2" (default,
    duality-weighted estimator with L2 representer norms) or "h1"
    (energy estimator with dual-space norms computed on the bound mesh).
    """

    regions: tuple[Rectangle, ...]
    scales: np.ndarray
    gamma: np.ndarray
    data: np.ndarray
    goal_region: Rectangle
    goal_scale: float
    variant: str = "l2"
    c_star: float = 1.0
    _bound_cache: "weakref.WeakKeyDictionary" = field(
        default_factory=weakref.WeakKeyDictionary, compare=False, repr=False
    )

    def __post_init__(self):
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        k = len(self.regions)
        if self.scales.shape != (k,) or self.data.shape != (k,):
            raise ValueError("scales and data must match the number of regions")
        if self.gamma.shape != (k, k):
            raise ValueError("noise covariance has wrong shape")
        if self.variant not in ("l2", "h1"):
            raise ValueError("variant must be 'l2' or 'h1'")
        try:
            chol = cho_factor(self.gamma, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("noise covariance is not symmetric positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def num_observations(self) -> int:
        return len(self.regions)

    def misfit_norm(self, obs: np.ndarray) -> float:
        """Covariance-weighted misfit |data - obs|_Gamma."""
        r = self.data - np.asarray(obs, dtype=float)
        return float(np.sqrt(max(r @ cho_solve(self._chol, r), 0.0)))

    @property
    def obs_norm_l2(self) -> float:
        """||Gamma^{-1/2} O|| with L2 Riesz representers (closed form).

        Equals sqrt(trace(Gamma^{-1} Gram)) where Gram_jk = scale_j scale_k
        |I_j intersect I_k|.
        """
        k = self.num_observations
        gram = np.empty((k, k))
        for i in range(k):
            for j in range(k):
                gram[i, j] = (
                    self.scales[i]
                    * self.scales[j]
                    * self.regions[i].intersection_area(self.regions[j])
                )
        return float(np.sqrt(max(np.trace(cho_solve(self._chol, gram)), 0.0)))

    @property
    def goal_norm_l2(self) -> float:
        """L2 norm of the goal representer: scale * sqrt(area)."""
        return self.goal_scale * float(np.sqrt(self.goal_region.area))

    def bind(self, mesh: TriangleMesh) -> "BoundObservations":
        bound = self._bound_cache.get(mesh)
        if bound is None:
            bound = BoundObservations(self, mesh)
            self._bound_cache[mesh] = bound
        return bound


class BoundObservations:
    """Observation and goal functionals assembled on a concrete mesh."""

    def __init__(self, setup: ObservationSetup, mesh: TriangleMesh):
        self.setup = setup
        self.mesh = mesh
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        for rect in list(setup.regions) + [setup.goal_region]:
            if rect.x0 < lo[0] - 1e-12 or rect.x1 > hi[0] + 1e-12 or rect.y0 < lo[1] - 1e-12 or rect.y1 > hi[1] + 1e-12:
                raise ValueError("observation region is not contained in the meshed domain")
        self.obs_vectors = np.stack(
            [
                scale * hat_integrals_over_rectangle(mesh, rect)
                for scale, rect in zip(setup.scales, setup.regions)
            ]
        )
        self.goal_vector = setup.goal_scale * hat_integrals_over_rectangle(
            mesh, setup.goal_region
        )
        self._dual_norms: Optional[tuple[float, float]] = None

    def observe(self, u_h: FieldSolution) -> np.ndarray:
        if u_h.mesh is not self.mesh:
            raise ValueError("field lives on a different mesh")
        return self.obs_vectors @ u_h.values

    def goal(self, u_h: FieldSolution) -> float:
        if u_h.mesh is not self.mesh:
            raise ValueError("field lives on a different mesh")
        return float(self.goal_vector @ u_h.values)

    def dual_norms(self) -> tuple[float, float]:
        """(||Gamma^{-1/2} O||, ||G||) in the dual of the energy space.

        Discrete surrogates:  the representer of a functional with load
        vector o solves the Laplace system, and the squared dual norm is
        o^T A^{-1} o on the free dofs.
        """
        if self._dual_norms is None:
            from .coefficient import constant_coefficient

            sys1 = StiffnessSystem(self.mesh, constant_coefficient(1.0), np.zeros(0))
            free = self.mesh.free_vertices
            k = self.setup.num_observations
            gram = np.empty((k, k))
            sols = [sys1._lu.solve(vec[free]) for vec in self.obs_vectors]
            for i in range(k):
                for j in range(k):
                    gram[i, j] = self.obs_vectors[i][free] @ sols[j]
            obs_norm = float(np.sqrt(max(np.trace(cho_solve(self.setup._chol, gram)), 0.0)))
            gsol = sys1._lu.solve(self.goal_vector[free])
            goal_norm = float(np.sqrt(max(self.goal_vector[free] @ gsol, 0.0)))
            self._dual_norms = (obs_norm, goal_norm)
        return self._dual_norms


def observe(setup: ObservationSetup, u_h: FieldSolution) -> np.ndarray:
    """Exact observation vector of a P1 field."""
    return setup.bind(u_h.mesh).observe(u_h)


def likelihood(setup: ObservationSetup, u_h: FieldSolution) -> float:
    """Gaussian likelihood exp(-|data - obs(u_h)|_Gamma^2 / 2), in (0, 1]."""
    misfit = setup.misfit_norm(observe(setup, u_h))
    return float(np.exp(-0.5 * misfit**2))


@dataclass(frozen=True)
class LikelihoodSample:
    """Per-sample quantities of the likelihood-ratio pipeline at one y."""

    y: np.ndarray
    theta: float
    goal_value: float
    weighted_goal: float
    misfit: float
    eta: float
    chi: float
    zeta: float
    zeta_prime: float


def _norms_for_variant(setup: ObservationSetup, bound: BoundObservations) -> tuple[float, float]:
    if setup.variant == "l2":
        return setup.obs_norm_l2, setup.goal_norm_l2
    return bound.dual_norms()


def zeta_sample(
    setup: ObservationSetup,
    u_h: FieldSolution,
    eta: ResidualBreakdown,
) -> tuple[float, float]:
    """Per-sample bound on the likelihood FE error; returns (zeta, chi).

    chi = ||Gamma^{-1/2} O|| (misfit + ||Gamma^{-1/2} O|| c* eta / 2) c* eta
    and zeta = Theta_h (e^chi - 1), with the norm variant matching the
    estimator variant.
    """
    if eta.variant != setup.variant:
        raise ValueError(
            f"estimator variant {eta.variant!r} does not match setup variant {setup.variant!r}"
        )
    bound = setup.bind(u_h.mesh)
    obs_norm, _ = _norms_for_variant(setup, bound)
    misfit = setup.misfit_norm(bound.observe(u_h))
    ce = setup.c_star * eta.total
    chi = obs_norm * (misfit + 0.5 * obs_norm * ce) * ce
    theta = float(np.exp(-0.5 * misfit**2))
    with np.errstate(over="ignore"):  # inf marks the pre-asymptotic regime
        zeta = theta * float(np.expm1(chi))
    return zeta, chi


def zeta_prime_sample(
    setup: ObservationSetup,
    u_h: FieldSolution,
    zeta: float,
    chi: float,
    eta: ResidualBreakdown,
) -> float:
    """Per-sample bound on the goal-weighted likelihood FE error.

    zeta' = ||G|| (c* eta Theta_h e^chi + zeta ||u_h||), with the field norm
    matching the estimator variant (L2 or energy).
    """
    if eta.variant != setup.variant:
        raise ValueError(
            f"estimator variant {eta.variant!r} does not match setup variant {setup.variant!r}"
        )
    bound = setup.bind(u_h.mesh)
    _, goal_norm = _norms_for_variant(setup, bound)
    misfit = setup.misfit_norm(bound.observe(u_h))
    theta = float(np.exp(-0.5 * misfit**2))
    if setup.variant == "l2":
        u_norm = fem.l2_norm(u_h.mesh, u_h.values)
    else:
        from .coefficient import constant_coefficient

        sys1 = StiffnessSystem(u_h.mesh, constant_coefficient(1.0), np.zeros(0))
        u_norm = float(np.sqrt(max(sys1.energy(u_h.values, u_h.values), 0.0)))
    with np.errstate(over="ignore"):  # inf marks the pre-asymptotic regime
        return goal_norm * (
            setup.c_star * eta.total * theta * np.exp(chi) + zeta * u_norm
        )


def evaluate_sample(
    setup: ObservationSetup,
    mesh: TriangleMesh,
    coeff: AffineCoefficient,
    y: np.ndarray,
    rhs,
    with_bounds: bool = True,
    system: Optional[StiffnessSystem] = None,
) -> LikelihoodSample:
    """Full per-sample pipeline: solve, observe, likelihood and FE bounds."""
    if system is None:
        system = StiffnessSystem(mesh, coeff, y)
    u_h = system.solve_field(rhs)
    bound = setup.bind(mesh)
    misfit = setup.misfit_norm(bound.observe(u_h))
    theta = float(np.exp(-0.5 * misfit**2))
    goal_value = bound.goal(u_h)
    if not with_bounds:
        return LikelihoodSample(
            y=np.asarray(y, dtype=float),
            theta=theta,
            goal_value=goal_value,
            weighted_goal=goal_value * theta,
            misfit=misfit,
            eta=float("nan"),
            chi=float("nan"),
            zeta=float("nan"),
            zeta_prime=float("nan"),
        )
    if setup.variant == "l2":
        eta = fem.l2_residual(mesh, coeff, y, u_h, rhs, c_star=setup.c_star)
    else:
        eta = fem.h1_residual(mesh, coeff, y, u_h, rhs, c_star=setup.c_star)
    zeta, chi = zeta_sample(setup, u_h, eta)
    zeta_p = zeta_prime_sample(setup, u_h, zeta, chi, eta)
    return LikelihoodSample(
        y=np.asarray(y, dtype=float),
        theta=theta,
        goal_value=goal_value,
        weighted_goal=goal_value * theta,
        misfit=misfit,
        eta=eta.total,
        chi=chi,
        zeta=zeta,
        zeta_prime=zeta_p,
    )


def write_samples_csv(path: str, samples: Sequence[LikelihoodSample]) -> None:
    """Per-sample dump: index, likelihood, misfit, indicator and bounds."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "theta", "misfit", "eta", "zeta", "zeta_prime"])
        for i, s in enumerate(samples):
            w.writerow(
                [
                    i,
                    repr(s.theta),
                    repr(s.misfit),
                    repr(s.eta),
                    repr(s.zeta),
                    repr(s.zeta_prime),
                ]
            )


def posterior_mean(weighted_goal_mean: float, likelihood_mean: float) -> float:
    """Ratio of the goal-weighted likelihood average to the likelihood average."""
    if not likelihood_mean > 0.0:
        raise ValueError("likelihood average must be positive")
    return weighted_goal_mean / likelihood_mean


def synthesize_data(
    coeff: AffineCoefficient,
    mesh: TriangleMesh,
    rhs,
    regions: Sequence[Rectangle],
    scales: Sequence[float],
    seed: int = 20240809,
    noise_fraction: float = 0.1,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Draw a truth sample, observe it and add scaled Gaussian noise.

    Mirrors the reference data generation recipe: the noise deviation is
    ``noise_fraction`` times the arithmetic mean of the noise-free
    observations.  Returns (data, sigma, truth parameter vector).  The RNG
    seed is fixed and documented; the bundled data vector is shipped
    separately for exact reproduction.
    """
    rng = np.random.default_rng(seed)
    truth = rng.uniform(-0.5, 0.5, size=coeff.dimension)
    system = StiffnessSystem(mesh, coeff, truth)
    u = system.solve_field(rhs)
    vectors = np.stack(
        [s * hat_integrals_over_rectangle(mesh, r) for s, r in zip(scales, regions)]
    )
    clean = vectors @ u.values
    sigma = noise_fraction * float(np.mean(clean))
    data = clean + sigma * rng.standard_normal(len(regions))
    return data, sigma, truth


def default_setup(
    data: Optional[np.ndarray] = None,
    sigma: Optional[float] = None,
    variant: str = "l2",
    c_star: float = 1.0,
) -> ObservationSetup:
    """Reference four-sensor setup with the bundled data vector.

    The noise deviation defaults to ``0.1 * mean(data)``, matching the
    recipe used to generate the bundled observations.
    """
    if data is None:
        data = BUNDLED_DATA
    data = np.asarray(data, dtype=float)
    if sigma is None:
        sigma = 0.1 * float(np.mean(data))
    regions = default_sensor_rectangles()
    scales = np.full(len(regions), 1.0 / 0.01)
    return ObservationSetup(
        regions=tuple(regions),
        scales=scales,
        gamma=sigma**2 * np.eye(len(regions)),
        data=data,
        goal_region=Rectangle(0.25, 0.75, 0.25, 0.75),
        goal_scale=1.0 / 0.5,
        variant=variant,
        c_star=c_star,
    )
