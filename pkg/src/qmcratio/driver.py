"""Adaptive two-phase driver, Monte Carlo reference oracle and CLI plumbing.

The adaptive loop first refines the mesh uniformly at the coarsest lattice
level until the discretization term of the combined estimator meets its
tolerance (invalid pre-asymptotic values count as not met), then raises the
lattice level on the final mesh until the two-level quadrature term meets
its tolerance.  Every iteration is logged; pre-asymptotic rows are flagged,
never dropped.
"""

from __future__ import annotations

import configparser
import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import bip, fem, ocp, ratio
from .coefficient import AffineCoefficient, coefficient_from_config, sine_modes
from .mesh import TriangleMesh, crosshatch_mesh, prolong, uniform_refine, unit_square_mesh
from .qmc import LatticeRule, SpodWeights, sample_mean


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


@dataclass
class ReferenceSpec:
    mode: str = "mc"  # "mc" or "mlmc"
    samples: int = 4000
    extra_refines: int = 0
    mesh_n: int = 64
    family: str = "crosshatch"
    seed: int = 20240809
    batches: int = 32
    levels: int = 2
    mlmc_factor: float = 4.0


@dataclass
class RunConfig:
    """Validated configuration of one adaptive run."""

    kind: str = "bip"
    tau_fem: float = 2.0**-6
    tau_qmc: float = 2.0**-6
    base: int = 2
    m0: int = 2
    max_dofs: int = 3_000_000
    max_m: int = 16
    mesh_family: str = "crosshatch"
    initial_n: int = 4
    coefficient_spec: str = "sine16"
    kappa: float = 0.25
    rhs_value: float = 10.0
    c_star: float = 1.0
    variant: str = "l2"
    data: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    spod_alpha: int = 3
    spod_n: Optional[int] = None
    spod_c: float = 1.0
    beta_scale: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 0.1
    theta: float = 1.0
    box_lower: float = -10.0
    box_upper: float = 10.0
    uhat: str = "bump"
    control_tol: float = 1e-7
    control_max_iter: int = 200
    output_dir: str = "out"
    n_jobs: int = 1
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)

    def __post_init__(self):
        if self.kind not in ("bip", "ocp"):
            raise ConfigError("kind must be 'bip' or 'ocp'")
        if self.tau_fem <= 0 or self.tau_qmc <= 0:
            raise ConfigError("tolerances must be positive")
        if self.m0 < 1:
            raise ConfigError("initial lattice level must be at least 1")
        if self.base != 2:
            raise ConfigError("only base 2 lattices are supported")
        if self.mesh_family not in ("crosshatch", "structured"):
            raise ConfigError("mesh family must be 'crosshatch' or 'structured'")

    def make_mesh(self) -> TriangleMesh:
        maker = crosshatch_mesh if self.mesh_family == "crosshatch" else unit_square_mesh
        return maker(self.initial_n)

    def make_coefficient(self) -> AffineCoefficient:
        return coefficient_from_config(self.coefficient_spec, kappa=self.kappa)

    def make_rule(self, coeff: AffineCoefficient) -> LatticeRule:
        n_shift = self.spod_n
        if n_shift is None:
            n_shift = 0 if self.kind == "bip" else 2
        weights = SpodWeights(
            alpha=self.spod_alpha,
            n=n_shift,
            c=self.spod_c,
            beta=self.beta_scale * coeff.b_seq,
        )
        return LatticeRule(dimension=coeff.dimension, weights=weights)

    def make_setup(self) -> bip.ObservationSetup:
        return bip.default_setup(
            data=self.data, sigma=self.sigma, variant=self.variant, c_star=self.c_star
        )


def load_config(path: str) -> RunConfig:
    """Parse an INI-style configuration file (sections per module)."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    cfg = RunConfig()
    try:
        run = parser["run"] if parser.has_section("run") else {}
        cfg.kind = run.get("kind", cfg.kind)
        cfg.tau_fem = float(run.get("tau_fem", cfg.tau_fem))
        cfg.tau_qmc = float(run.get("tau_qmc", cfg.tau_qmc))
        cfg.base = int(run.get("b", cfg.base))
        cfg.m0 = int(run.get("m0", cfg.m0))
        cfg.max_dofs = int(run.get("max_dofs", cfg.max_dofs))
        cfg.max_m = int(run.get("max_m", cfg.max_m))
        cfg.output_dir = run.get("output_dir", cfg.output_dir)
        cfg.n_jobs = int(run.get("n_jobs", cfg.n_jobs))

        mesh_sec = parser["mesh"] if parser.has_section("mesh") else {}
        cfg.mesh_family = mesh_sec.get("family", cfg.mesh_family)
        cfg.initial_n = int(mesh_sec.get("initial_n", cfg.initial_n))

        coeff_sec = parser["coefficient"] if parser.has_section("coefficient") else {}
        cfg.coefficient_spec = coeff_sec.get("kind", cfg.coefficient_spec)
        cfg.kappa = float(coeff_sec.get("kappa", cfg.kappa))
        cfg.rhs_value = float(coeff_sec.get("rhs", cfg.rhs_value))

        bip_sec = parser["bip"] if parser.has_section("bip") else {}
        if "delta" in bip_sec:
            spec = bip_sec["delta"].strip()
            if spec != "synthesize":
                cfg.data = np.array([float(v) for v in spec.split(",")])
        if "sigma" in bip_sec:
            cfg.sigma = float(bip_sec["sigma"])
        cfg.variant = bip_sec.get("variant", cfg.variant)
        cfg.c_star = float(bip_sec.get("c_star", cfg.c_star))

        spod = parser["spod"] if parser.has_section("spod") else {}
        cfg.spod_alpha = int(spod.get("alpha", cfg.spod_alpha))
        if "n" in spod:
            cfg.spod_n = int(spod["n"])
        cfg.spod_c = float(spod.get("c", cfg.spod_c))
        cfg.beta_scale = float(spod.get("beta_scale", cfg.beta_scale))

        ocp_sec = parser["ocp"] if parser.has_section("ocp") else {}
        cfg.alpha1 = float(ocp_sec.get("alpha1", cfg.alpha1))
        cfg.alpha2 = float(ocp_sec.get("alpha2", cfg.alpha2))
        cfg.theta = float(ocp_sec.get("theta", cfg.theta))
        if "box" in ocp_sec:
            lo, hi = (float(v) for v in ocp_sec["box"].split(","))
            cfg.box_lower, cfg.box_upper = lo, hi
        cfg.uhat = ocp_sec.get("uhat", cfg.uhat)
        cfg.control_tol = float(ocp_sec.get("tol", cfg.control_tol))
        cfg.control_max_iter = int(ocp_sec.get("max_iter", cfg.control_max_iter))

        ref = parser["reference"] if parser.has_section("reference") else {}
        cfg.reference = ReferenceSpec(
            mode=ref.get("mode", "mc"),
            samples=int(ref.get("samples", 4000)),
            mesh_n=int(ref.get("mesh_n", 64)),
            family=ref.get("family", cfg.mesh_family),
            extra_refines=int(ref.get("extra_refines", 0)),
            seed=int(ref.get("seed", 20240809)),
            batches=int(ref.get("batches", 32)),
            levels=int(ref.get("levels", 2)),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    cfg.__post_init__()
    return cfg


@dataclass
class IterationRow:
    """One line of the adaptive log."""

    iteration: int
    phase: str
    dofs: int
    h_max: float
    level: int
    den: float
    num_norm: float
    qmc_term: float
    fem_term: float
    est: float
    realized_err: float
    valid: bool
    seconds: float

    CSV_HEADER = (
        "iter",
        "phase",
        "dofs",
        "h_max",
        "m",
        "Z",
        "normZp",
        "qmc_term",
        "fem_term",
        "est",
        "realized_err",
        "valid",
        "seconds",
    )

    def csv_row(self) -> list:
        return [
            self.iteration,
            self.phase,
            self.dofs,
            repr(self.h_max),
            self.level,
            repr(self.den),
            repr(self.num_norm),
            repr(self.qmc_term),
            repr(self.fem_term),
            repr(self.est),
            repr(self.realized_err),
            int(self.valid),
            f"{self.seconds:.3f}",
        ]


@dataclass
class RunResult:
    rows: list
    status: int
    final_ratio: object
    final_mesh: TriangleMesh
    final_level: int
    reference: Optional[object] = None


def _parallel_map(fn: Callable, items: Sequence, n_jobs: int) -> list:
    """Order-preserving map; results are independent of the thread count."""
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


class BipPipeline:
    """Per-(mesh, level) aggregates of the likelihood-ratio integrands."""

    def __init__(self, config: RunConfig, coeff: AffineCoefficient, rule: LatticeRule):
        self.config = config
        self.coeff = coeff
        self.rule = rule
        self.setup = config.make_setup()
        self._cache: dict = {}

    def level_data(self, mesh: TriangleMesh, m: int, with_bounds: bool):
        key = (id(mesh), m, with_bounds)
        if key in self._cache:
            return self._cache[key]
        pts = self.rule.points(m)
        cfg = self.config

        def one(y):
            return bip.evaluate_sample(
                self.setup, mesh, self.coeff, y, cfg.rhs_value, with_bounds=with_bounds
            )

        samples = _parallel_map(one, list(pts), cfg.n_jobs)
        den = float(sample_mean(np.array([s.theta for s in samples])))
        num = float(sample_mean(np.array([s.weighted_goal for s in samples])))
        if with_bounds:
            den_err = ratio.aggregate_zeta(np.array([s.zeta for s in samples]))
            num_err = ratio.aggregate_zeta(np.array([s.zeta_prime for s in samples]))
        else:
            den_err = num_err = 0.0
        out = (den, num, den_err, num_err)
        self._cache[key] = out
        return out

    def report(self, mesh: TriangleMesh, m: int) -> ratio.EstimatorReport:
        den, num, den_err, num_err = self.level_data(mesh, m, True)
        den_p, num_p, _, _ = self.level_data(mesh, m - 1, False)
        data = ratio.RatioLevelData(
            den=den,
            den_prev=den_p,
            num=num,
            num_prev=num_p,
            den_err=den_err,
            num_err=num_err,
            base=self.config.base,
            level=m,
            h_max=mesh.h_max,
        )
        return ratio.combined_estimator(data)

    def ratio_value(self, mesh: TriangleMesh, m: int) -> float:
        den, num, _, _ = self.level_data(mesh, m, True)
        return bip.posterior_mean(num, den)

    def realized_error(self, value, reference) -> float:
        return abs(value - reference.value)


class OcpPipeline:
    """Per-(mesh, level) control solve and risk-integrand aggregates."""

    def __init__(self, config: RunConfig, coeff: AffineCoefficient, rule: LatticeRule):
        self.config = config
        self.coeff = coeff
        self.rule = rule
        self._controls: dict = {}
        self._level_cache: dict = {}
        self._warm: Optional[tuple[TriangleMesh, np.ndarray]] = None

    def _target(self, mesh: TriangleMesh) -> np.ndarray:
        if self.config.uhat != "bump":
            raise ConfigError(f"unknown target spec: {self.config.uhat!r}")
        return ocp.bump_target(mesh)

    def problem(self, mesh: TriangleMesh, m: int) -> ocp.ControlProblem:
        cfg = self.config
        return ocp.ControlProblem(
            mesh=mesh,
            coeff=self.coeff,
            rule=self.rule,
            level=m,
            u_hat=self._target(mesh),
            alpha1=cfg.alpha1,
            alpha2=cfg.alpha2,
            theta=cfg.theta,
            lower=cfg.box_lower,
            upper=cfg.box_upper,
            c_star=cfg.c_star,
        )

    def control(self, mesh: TriangleMesh, m: int) -> ocp.ControlIterate:
        key = (id(mesh), m)
        if key in self._controls:
            return self._controls[key]
        problem = self.problem(mesh, m)
        initial = None
        if self._warm is not None:
            src, ctrl = self._warm
            if src is mesh:
                initial = ctrl
            else:
                try:
                    initial = prolong(ctrl, src, mesh)
                except ValueError:
                    initial = None
        it = ocp.solve_control(
            problem,
            tol=self.config.control_tol,
            max_iter=self.config.control_max_iter,
            initial=initial,
        )
        self._controls[key] = it
        self._warm = (mesh, it.control)
        return it

    def _levels(self, mesh: TriangleMesh, m: int, control: np.ndarray):
        """Aggregates at levels m and m-1 under one common shift."""
        key = (id(mesh), m)
        if key in self._level_cache:
            return self._level_cache[key]
        problem = self.problem(mesh, m)
        cur = ocp.risk_samples(problem, control, with_bounds=True)
        prev = ocp.risk_samples(
            problem, control, with_bounds=False, points=self.rule.points(m - 1)
        )
        shift = max(
            max(s.log_weight for s in cur), max(s.log_weight for s in prev)
        )
        agg = ocp.aggregate_risk_samples(problem, cur, shift, with_bounds=True)
        agg_prev = ocp.aggregate_risk_samples(problem, prev, shift, with_bounds=False)
        out = (problem, agg, agg_prev)
        self._level_cache[key] = out
        return out

    def report(self, mesh: TriangleMesh, m: int) -> ratio.EstimatorReport:
        it = self.control(mesh, m)
        problem, agg, agg_prev = self._levels(mesh, m, it.control)
        data = ratio.RatioLevelData(
            den=agg.den,
            den_prev=agg_prev.den,
            num=agg.num,
            num_prev=agg_prev.num,
            den_err=agg.den_err,
            num_err=agg.num_err,
            base=self.config.base,
            level=m,
            h_max=mesh.h_max,
        )
        return ratio.combined_estimator(data, norm=problem.norm)

    def ratio_value(self, mesh: TriangleMesh, m: int) -> np.ndarray:
        it = self.control(mesh, m)
        _, agg, _ = self._levels(mesh, m, it.control)
        return agg.num / agg.den

    def realized_error(self, value, reference) -> float:
        return float("nan")


def adaptive_run(config: RunConfig, reference: Optional["ReferenceResult"] = None) -> RunResult:
    """Two-phase adaptive refinement; returns the log and the final ratio.

    Phase 1 refines the mesh at the coarsest level until the discretization
    term meets tau_fem; phase 2 raises the level until the two-level term
    meets tau_qmc.  Hitting a resource cap yields status 2.
    """
    coeff = config.make_coefficient()
    rule = config.make_rule(coeff)
    if config.kind == "bip":
        pipeline = BipPipeline(config, coeff, rule)
    else:
        pipeline = OcpPipeline(config, coeff, rule)

    rows: list[IterationRow] = []
    mesh = config.make_mesh()
    m = config.m0
    iteration = 0

    def log_row(phase: str, rep: ratio.EstimatorReport, t0: float) -> IterationRow:
        nonlocal iteration
        iteration += 1
        value = pipeline.ratio_value(mesh, m)
        realized = (
            pipeline.realized_error(value, reference) if reference is not None else float("nan")
        )
        row = IterationRow(
            iteration=iteration,
            phase=phase,
            dofs=mesh.num_dofs,
            h_max=mesh.h_max,
            level=m,
            den=rep.den,
            num_norm=rep.num_norm,
            qmc_term=rep.qmc_term,
            fem_term=rep.fem_term,
            est=rep.total,
            realized_err=realized,
            valid=rep.valid,
            seconds=time.time() - t0,
        )
        rows.append(row)
        return row

    status = 0
    # Phase 1: mesh refinement at the coarsest lattice level.
    while True:
        t0 = time.time()
        rep = pipeline.report(mesh, m)
        log_row("fem", rep, t0)
        if rep.fem_valid and rep.fem_term <= config.tau_fem:
            break
        next_mesh = uniform_refine(mesh)
        if next_mesh.num_dofs > config.max_dofs:
            status = 2
            break
        mesh = next_mesh

    # Phase 2: lattice refinement on the final mesh.  The first check at the
    # entry level reuses the cached aggregates from the closing mesh
    # iteration; within this phase the level strictly increases.
    if status == 0:
        while True:
            t0 = time.time()
            rep = pipeline.report(mesh, m)
            log_row("qmc", rep, t0)
            if rep.qmc_valid and rep.qmc_term <= config.tau_qmc:
                break
            if m + 1 > config.max_m:
                status = 2
                break
            m += 1

    final_ratio = pipeline.ratio_value(mesh, m)
    return RunResult(
        rows=rows,
        status=status,
        final_ratio=final_ratio,
        final_mesh=mesh,
        final_level=m,
        reference=reference,
    )


@dataclass
class ReferenceResult:
    value: object
    std_error: float
    mesh: TriangleMesh
    samples: int
    mode: str = "mc"


def reference_ratio(config: RunConfig, spec: Optional[ReferenceSpec] = None) -> ReferenceResult:
    """Pseudo-random Monte Carlo reference for the ratio, with batch-means error.

    Single-level by default; the multilevel mode telescopes numerator and
    denominator over a short mesh hierarchy with geometrically decreasing
    sample counts (variance/cost heuristics are documented in the README).
    """
    spec = spec or config.reference
    if spec.samples < 1:
        raise ConfigError("reference sample budget must be positive")
    coeff = config.make_coefficient()
    setup = config.make_setup()
    maker = crosshatch_mesh if spec.family == "crosshatch" else unit_square_mesh
    mesh = maker(spec.mesh_n)
    for _ in range(spec.extra_refines):
        mesh = uniform_refine(mesh)
    rng = np.random.default_rng(spec.seed)

    if config.kind != "bip":
        raise ConfigError("the Monte Carlo reference supports the bip kind")

    def batch_values(mesh, count, rng):
        th = np.empty(count)
        wg = np.empty(count)
        for i in range(count):
            y = rng.uniform(-0.5, 0.5, coeff.dimension)
            s = bip.evaluate_sample(setup, mesh, coeff, y, config.rhs_value, with_bounds=False)
            th[i] = s.theta
            wg[i] = s.weighted_goal
        return th, wg

    if spec.mode == "mc":
        th, wg = batch_values(mesh, spec.samples, rng)
        value = float(sample_mean(wg) / sample_mean(th))
        nb = min(spec.batches, spec.samples)
        bounds = np.linspace(0, spec.samples, nb + 1, dtype=int)
        ratios = []
        for k in range(nb):
            sl = slice(bounds[k], bounds[k + 1])
            if bounds[k + 1] > bounds[k] and np.sum(th[sl]) > 0:
                ratios.append(float(np.mean(wg[sl]) / np.mean(th[sl])))
        ratios = np.array(ratios)
        se = float(np.std(ratios, ddof=1) / np.sqrt(len(ratios))) if len(ratios) > 1 else 0.0
        return ReferenceResult(value=value, std_error=se, mesh=mesh, samples=spec.samples, mode="mc")

    if spec.mode != "mlmc":
        raise ConfigError(f"unknown reference mode: {spec.mode!r}")

    # Multilevel telescope on numerator and denominator separately.
    meshes = [mesh]
    for _ in range(spec.levels - 1):
        meshes.append(uniform_refine(meshes[-1]))
    counts = [
        max(8, int(round(spec.samples / spec.mlmc_factor**lev)))
        for lev in range(spec.levels)
    ]
    num_total, den_total = 0.0, 0.0
    var_accum = 0.0
    for lev, (msh, count) in enumerate(zip(meshes, counts)):
        th = np.empty(count)
        wg = np.empty(count)
        for i in range(count):
            y = rng.uniform(-0.5, 0.5, coeff.dimension)
            s = bip.evaluate_sample(setup, msh, coeff, y, config.rhs_value, with_bounds=False)
            th[i] = s.theta
            wg[i] = s.weighted_goal
            if lev > 0:
                s0 = bip.evaluate_sample(
                    setup, meshes[lev - 1], coeff, y, config.rhs_value, with_bounds=False
                )
                th[i] -= s0.theta
                wg[i] -= s0.weighted_goal
        den_total += float(np.mean(th))
        num_total += float(np.mean(wg))
        var_accum += float(np.var(wg, ddof=1) + np.var(th, ddof=1)) / count
    value = num_total / den_total
    se = float(np.sqrt(var_accum) / abs(den_total))
    return ReferenceResult(
        value=value, std_error=se, mesh=meshes[-1], samples=sum(counts), mode="mlmc"
    )


# ---------------------------------------------------------------------------
# Convergence suites
# ---------------------------------------------------------------------------


def fem_convergence_table(levels: int = 4, initial_n: int = 8) -> list[dict]:
    """Manufactured-solution ladder: errors, indicators, efficiency indices."""
    from .coefficient import constant_coefficient

    unit = constant_coefficient(1.0)

    def exact(x):
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def exact_grad(x):
        gx = np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        gy = np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
        return np.column_stack([gx, gy])

    def rhs(x):
        return 2 * np.pi**2 * exact(x)

    rows = []
    mesh = unit_square_mesh(initial_n)
    y = np.zeros(0)
    for lev in range(levels):
        system = fem.StiffnessSystem(mesh, unit, y)
        u = system.solve_field(rhs)
        l2_err, h1_err = _field_errors(mesh, u.values, exact, exact_grad)
        eta = fem.h1_residual(mesh, unit, y, u, rhs)
        eta_l2 = fem.l2_residual(mesh, unit, y, u, rhs)
        rows.append(
            {
                "level": lev,
                "dofs": mesh.num_dofs,
                "h_max": mesh.h_max,
                "l2_error": l2_err,
                "h1_error": h1_err,
                "eta_h1": eta.total,
                "eta_l2": eta_l2.total,
                "eff_h1": eta.total / h1_err,
                "eff_l2": eta_l2.total / l2_err,
            }
        )
        if lev + 1 < levels:
            mesh = uniform_refine(mesh)
    return rows


def _field_errors(mesh: TriangleMesh, values, exact, exact_grad) -> tuple[float, float]:
    """L2 and H1-seminorm errors by order-4 elementwise quadrature."""
    geo = mesh.geometry
    l2_sq = 0.0
    h1_sq = 0.0
    for lo, hi in fem._tri_chunks(mesh.num_triangles):
        pts = fem.quad_points(mesh, lo, hi)
        flat = pts.reshape(-1, 2)
        uh = np.einsum(
            "qb,tb->tq", fem.TRI_QUAD_BARY, values[mesh.triangles[lo:hi]]
        )
        diff = uh - exact(flat).reshape(uh.shape)
        l2_sq += float(np.einsum("t,tq,q->", geo.areas[lo:hi], diff**2, fem.TRI_QUAD_W))
        grad_uh = np.einsum(
            "tid,ti->td", geo.hat_gradients[lo:hi], values[mesh.triangles[lo:hi]]
        )
        gdiff = grad_uh[:, None, :] - exact_grad(flat).reshape(hi - lo, -1, 2)
        h1_sq += float(
            np.einsum("t,tqd,q->", geo.areas[lo:hi], gdiff**2, fem.TRI_QUAD_W)
        )
    return float(np.sqrt(l2_sq)), float(np.sqrt(h1_sq))


def qmc_convergence_table(
    dimension: int = 8,
    m_values: Sequence[int] = tuple(range(6, 15)),
    m_ref: int = 17,
) -> list[dict]:
    """Smooth product-integrand ladder against a fine-level reference."""
    beta = 0.5 / np.arange(1, dimension + 1) ** 2
    rule = LatticeRule(
        dimension=dimension, weights=SpodWeights(alpha=3, n=0, c=1.0, beta=beta)
    )

    def integrand(points):
        return np.prod(1.0 + points / 2.0, axis=1)

    means = {}
    for m in list(m_values) + [m_ref]:
        means[m] = float(sample_mean(integrand(rule.points(m))))
    rows = []
    for m in m_values:
        rows.append(
            {
                "m": m,
                "mean": means[m],
                "err_vs_ref": abs(means[m] - means[m_ref]),
                "succ_diff": abs(means[m] - means[m - 1]) if m - 1 in means else float("nan"),
            }
        )
    # fill successive differences for the first entry
    first = m_values[0]
    prev = float(sample_mean(integrand(rule.points(first - 1))))
    rows[0]["succ_diff"] = abs(means[first] - prev)
    return rows


def fitted_rate(xs: Sequence[float], errs: Sequence[float], base: float = 2.0) -> float:
    """Least-squares slope of log_base(err) against x."""
    xs = np.asarray(xs, dtype=float)
    logs = np.log(np.asarray(errs, dtype=float)) / np.log(base)
    a = np.vstack([xs, np.ones_like(xs)]).T
    return float(np.linalg.lstsq(a, logs, rcond=None)[0][0])


# ---------------------------------------------------------------------------
# Output emission
# ---------------------------------------------------------------------------


def write_iterations_csv(path: str, rows: Sequence[IterationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterationRow.CSV_HEADER)
        for row in rows:
            w.writerow(row.csv_row())


def read_iterations_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_final_summary(path: str, result: RunResult, config: RunConfig) -> None:
    summary = {
        "kind": config.kind,
        "status": result.status,
        "iterations": len(result.rows),
        "final_dofs": result.final_mesh.num_dofs,
        "final_m": result.final_level,
        "tau_fem": config.tau_fem,
        "tau_qmc": config.tau_qmc,
    }
    if np.isscalar(result.final_ratio):
        summary["final_ratio"] = float(result.final_ratio)
    else:
        summary["final_ratio_l2_norm"] = fem.l2_norm(
            result.final_mesh, np.asarray(result.final_ratio)
        )
    if result.reference is not None:
        summary["reference_value"] = (
            float(result.reference.value) if np.isscalar(result.reference.value) else None
        )
        summary["reference_std_error"] = result.reference.std_error
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


PLOT_SCRIPT = """\
#!/usr/bin/env python3
# Standalone plot of an adaptive run: estimated vs realized error per
# iteration, split by phase.  Reads iterations.csv from this directory.
import csv
import os

import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
rows = list(csv.DictReader(open(os.path.join(here, "iterations.csv"))))
iters = [int(r["iter"]) for r in rows]
est = [float(r["est"]) for r in rows]
realized = [float(r["realized_err"]) for r in rows]
fem_phase = [int(r["iter"]) for r in rows if r["phase"] == "fem"]
qmc_phase = [int(r["iter"]) for r in rows if r["phase"] == "qmc"]

fig, ax = plt.subplots(figsize=(7, 5))
valid = [(i, e) for i, e, r in zip(iters, est, rows) if r["valid"] == "1"]
if valid:
    ax.semilogy([v[0] for v in valid], [v[1] for v in valid], "*-", label="estimated")
if any(r == r for r in realized):  # any non-nan
    ax.semilogy(iters, realized, "d-", label="realized vs reference")
for i in fem_phase:
    ax.axvline(i, color="0.9", zorder=0)
if qmc_phase:
    ax.axvline(min(qmc_phase) - 0.5, color="k", linestyle=":", label="phase switch")
ax.set_xlabel("iteration")
ax.set_ylabel("error")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "convergence.png"), dpi=150)
print("wrote", os.path.join(here, "convergence.png"))
"""


def emit_outputs(result: RunResult, config: RunConfig) -> None:
    os.makedirs(config.output_dir, exist_ok=True)
    write_iterations_csv(os.path.join(config.output_dir, "iterations.csv"), result.rows)
    write_final_summary(os.path.join(config.output_dir, "final.json"), result, config)
    with open(os.path.join(config.output_dir, "plot.script"), "w") as fh:
        fh.write(PLOT_SCRIPT)
    if config.kind == "ocp" and not np.isscalar(result.final_ratio):
        with open(os.path.join(config.output_dir, "control.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "value"])
            for i, v in enumerate(np.asarray(result.final_ratio)):
                w.writerow([i, repr(float(v))])
