"""Polynomial lattice rules in base 2 with a weighted CBC construction.

A rule of level m has 2^m points.  Point k is obtained by interpreting the
binary digits of k as a polynomial k(x) over GF(2), multiplying by the
generating polynomial q_j of coordinate j modulo an irreducible modulus of
degree m, and reading the first m digits of the formal expansion of the
quotient; the points are then shifted from [0,1) to [-1/2, 1/2).

The generating vector is chosen coordinate by coordinate, minimizing the
mean-square worst-case error of digitally shifted rules in a weighted
unanchored Sobolev space, with the one-dimensional kernel

    omega(x) = 1/6 - 2^(floor(log2 x) - 1),    omega(0) = 1/6,

expanded over smoothness-driven product-and-order-dependent weights.  The
moduli are the lexicographically smallest primitive polynomials, so the
nonzero residues form a cyclic group generated by x and the candidate scan
for one coordinate reduces to a circular cross-correlation, evaluated with
an FFT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# GF(2) polynomial arithmetic on machine integers (bit i = coefficient of x^i)
# ---------------------------------------------------------------------------


def poly_mul(a: int, b: int) -> int:
    """Carry-less product of two GF(2) polynomials."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        b >>= 1
    return r


def poly_mod(a: int, p: int) -> int:
    """Remainder of a modulo p over GF(2)."""
    dp = p.bit_length()
    da = a.bit_length()
    while da >= dp:
        a ^= p << (da - dp)
        da = a.bit_length()
    return a


def poly_divmod(a: int, p: int) -> tuple[int, int]:
    """Quotient and remainder of a divided by p over GF(2)."""
    dp = p.bit_length()
    q = 0
    da = a.bit_length()
    while da >= dp:
        shift = da - dp
        q |= 1 << shift
        a ^= p << shift
        da = a.bit_length()
    return q, a


def poly_modexp(a: int, e: int, p: int) -> int:
    """a^e modulo p over GF(2) by square and multiply."""
    r = 1
    a = poly_mod(a, p)
    while e:
        if e & 1:
            r = poly_mod(poly_mul(r, a), p)
        a = poly_mod(poly_mul(a, a), p)
        e >>= 1
    return r


def _prime_factors(n: int) -> list[int]:
    out = []
    d = 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


_primitive_cache: Dict[int, int] = {}


def primitive_polynomial(m: int) -> int:
    """Lexicographically smallest primitive polynomial of degree m over GF(2).

    Primitivity is verified directly: x must have multiplicative order
    2^m - 1 modulo the candidate.  Degrees up to 30 are supported.
    """
    if m < 1 or m > 30:
        raise ValueError("modulus degree must be between 1 and 30")
    cached = _primitive_cache.get(m)
    if cached is not None:
        return cached
    order = (1 << m) - 1
    factors = _prime_factors(order) if order > 1 else []
    for cand in range((1 << m) + 1, 1 << (m + 1), 2):
        if poly_modexp(2, order, cand) != 1:
            continue
        if all(poly_modexp(2, order // f, cand) != 1 for f in factors):
            _primitive_cache[m] = cand
            return cand
    raise RuntimeError(f"no primitive polynomial of degree {m} found")


# ---------------------------------------------------------------------------
# Point generation
# ---------------------------------------------------------------------------


def _digit_quotients(w: np.ndarray, modulus: int, m: int) -> np.ndarray:
    """Vectorized quotient of (w * x^m) / modulus for residues w (deg < m).

    The quotient bits are the first m digits of w(x)/modulus(x), i.e. the
    lattice point scaled by 2^m.
    """
    u = w.astype(np.int64) << m
    q = np.zeros_like(u)
    for i in range(m - 1, -1, -1):
        bit = (u >> (m + i)) & 1
        q |= bit << i
        u ^= bit * (modulus << i)
    return q


def _coordinate_points(k: np.ndarray, gen: int, modulus: int, m: int) -> np.ndarray:
    """Points of one coordinate for all indices k, in [0, 1)."""
    prod = np.zeros_like(k, dtype=np.int64)
    g = gen
    kk = k.astype(np.int64)
    shift = 0
    while g:
        if g & 1:
            prod ^= kk << shift
        shift += 1
        g >>= 1
    # reduce modulo the degree-m modulus
    top = prod.max() if prod.size else 0
    deg = int(top).bit_length() - 1
    for d in range(deg, m - 1, -1):
        bit = (prod >> d) & 1
        prod ^= bit * (modulus << (d - m))
    return _digit_quotients(prod, modulus, m) / float(1 << m)


# ---------------------------------------------------------------------------
# SPOD weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpodWeights:
    """Smoothness-driven product-and-order-dependent weights.

    The weight of a coordinate subset u is

        gamma_u = sum over nu in {1..alpha}^{|u|} of
                  (|nu| + n)! * prod_{j in u} c * beta_j^{nu_j}.
    """

    alpha: int
    n: int
    c: float
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.alpha < 1:
            raise ValueError("smoothness order alpha must be >= 1")
        if self.n < 0:
            raise ValueError("factorial shift n must be >= 0")
        if self.c <= 0:
            raise ValueError("scale c must be positive")
        if np.any(self.beta <= 0):
            raise ValueError("beta sequence must be positive")

    @property
    def dimension(self) -> int:
        return self.beta.shape[0]

    def weight(self, subset: Iterable[int]) -> float:
        """gamma_u for a subset of 1-based coordinate indices."""
        u = sorted(set(int(j) for j in subset))
        if any(j < 1 or j > self.dimension for j in u):
            raise ValueError("subset indices must lie in 1..s")
        if not u:
            return float(math.factorial(self.n))
        if self.alpha * len(u) + self.n <= 140:
            # order-indexed convolution in linear space
            orders = np.zeros(1)
            orders[0] = 1.0
            for j in u:
                bj = self.c * self.beta[j - 1] ** np.arange(1, self.alpha + 1)
                new = np.zeros(orders.size + self.alpha)
                for nu in range(1, self.alpha + 1):
                    new[nu : nu + orders.size] += bj[nu - 1] * orders
                orders = new
            total = 0.0
            for ell, g in enumerate(orders):
                if g:
                    total += math.factorial(ell + self.n) * g
            return float(total)
        # log-space convolution for very large order ranges
        log_orders = np.full(1, 0.0)
        for j in u:
            logb = np.log(self.c) + np.arange(1, self.alpha + 1) * np.log(self.beta[j - 1])
            new = np.full(log_orders.size + self.alpha, -np.inf)
            for nu in range(1, self.alpha + 1):
                seg = new[nu : nu + log_orders.size]
                np.logaddexp(seg, logb[nu - 1] + log_orders, out=seg)
            log_orders = new
        terms = [
            math.lgamma(ell + self.n + 1) + g
            for ell, g in enumerate(log_orders)
            if np.isfinite(g)
        ]
        peak = max(terms)
        return float(math.exp(peak) * sum(math.exp(t - peak) for t in terms))


def bip_weights(beta: Sequence[float], alpha: int = 3, c: float = 1.0) -> SpodWeights:
    """Default weights for likelihood-ratio integrands (factorial shift 0)."""
    return SpodWeights(alpha=alpha, n=0, c=c, beta=np.asarray(beta, dtype=float))


def ocp_weights(beta: Sequence[float], alpha: int = 3, c: float = 1.0) -> SpodWeights:
    """Default weights for risk-functional integrands (factorial shift 2)."""
    return SpodWeights(alpha=alpha, n=2, c=c, beta=np.asarray(beta, dtype=float))


# ---------------------------------------------------------------------------
# CBC construction
# ---------------------------------------------------------------------------


def _omega_table(modulus: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Field exponentials e[i] = x^i mod modulus and kernel values omega(v(e[i]))."""
    size = (1 << m) - 1
    elems = np.empty(size, dtype=np.int64)
    e = 1
    top = 1 << m
    for i in range(size):
        elems[i] = e
        e <<= 1
        if e & top:
            e ^= modulus
    digits = _digit_quotients(elems, modulus, m)
    # omega(c / 2^m) = 1/6 - 2^(bitlength(c) - m - 2) for c >= 1
    bitlen = np.zeros(size, dtype=np.int64)
    tmp = digits.copy()
    while np.any(tmp):
        nz = tmp > 0
        bitlen[nz] += 1
        tmp >>= 1
    omega = 1.0 / 6.0 - np.exp2(bitlen - m - 2.0)
    return elems, omega


def _cbc_vector(m: int, s: int, weights: SpodWeights) -> list[int]:
    """Component-by-component generating vector for level m.

    Minimizes the shift-invariant-kernel worst-case error with the SPOD
    weights expanded over the derivative order; ties are broken by the
    smallest generating polynomial in lexicographic bit order.
    """
    modulus = primitive_polynomial(m)
    n_pts = 1 << m
    size = n_pts - 1
    elems, omega_log = _omega_table(modulus, m)
    omega0 = 1.0 / 6.0

    fft_omega = np.fft.fft(omega_log)

    lmax = weights.alpha * s
    # state[k, ell]: subset/order sums over coordinates chosen so far
    state = np.zeros((n_pts, lmax + 1))
    state[:, 0] = 1.0

    # factorial factors collapsed per remaining order
    fact = np.array([math.lgamma(ell + weights.n + 1) for ell in range(lmax + weights.alpha + 1)])

    gens: list[int] = []
    omega_at = np.empty(n_pts)
    for j in range(s):
        bj = weights.c * weights.beta[j] ** np.arange(1, weights.alpha + 1)
        lcur = weights.alpha * j  # max active order before this coordinate
        coeff = np.zeros(lcur + 1)
        for ell in range(lcur + 1):
            acc = 0.0
            for nu in range(1, weights.alpha + 1):
                acc += bj[nu - 1] * math.exp(fact[ell + nu] - fact[lcur + weights.alpha])
            coeff[ell] = acc
        w_vec = state[:, : lcur + 1] @ coeff
        scale = float(np.max(np.abs(w_vec)))
        if scale > 0:
            w_vec = w_vec / scale

        # candidate scores via circular cross-correlation over the cyclic group
        b = w_vec[elems]
        corr = np.fft.ifft(fft_omega * np.conj(np.fft.fft(b))).real
        best = float(np.min(corr))
        window = 1e-9 * max(1.0, float(np.max(np.abs(corr))))
        tied = np.flatnonzero(corr <= best + window)
        gen = int(np.min(elems[tied]))
        gens.append(gen)

        # update the per-point state with the chosen coordinate
        pts = _coordinate_points(np.arange(n_pts), gen, modulus, m)
        omega_at[:] = omega0
        nz = pts > 0
        c_int = np.rint(pts[nz] * n_pts).astype(np.int64)
        bl = np.frexp(c_int.astype(float))[1]  # bit length of c >= 1
        omega_at[nz] = 1.0 / 6.0 - np.exp2(bl - m - 2.0)

        new_state = state.copy()
        for nu in range(1, weights.alpha + 1):
            new_state[:, nu : lcur + 1 + nu] += (
                bj[nu - 1] * omega_at[:, None] * state[:, : lcur + 1]
            )
        state = new_state
    return gens


# ---------------------------------------------------------------------------
# Lattice rule container
# ---------------------------------------------------------------------------


@dataclass
class LatticeRule:
    """Family of base-2 polynomial lattice rules, one generating vector per level.

    Levels are constructed on demand; point sets are deterministic functions
    of (base, dimension, level, weights).
    """

    dimension: int
    weights: SpodWeights
    base: int = 2
    levels: Dict[int, tuple[int, list[int]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.base != 2:
            raise ValueError("only base 2 is supported")
        if self.weights.dimension < self.dimension:
            raise ValueError("weight sequence shorter than the dimension")

    def construct_level(self, m: int) -> tuple[int, list[int]]:
        """CBC construction of the generating data for level m (cached)."""
        if m < 1:
            raise ValueError("level must be >= 1")
        if m not in self.levels:
            modulus = primitive_polynomial(m)
            gens = _cbc_vector(m, self.dimension, self.weights)
            self.levels[m] = (modulus, gens)
        return self.levels[m]

    def ensure_levels(self, ms: Iterable[int]) -> None:
        for m in ms:
            if m >= 1:
                self.construct_level(m)

    def points(self, m: int) -> np.ndarray:
        """(2^m, s) points in [-1/2, 1/2)^s, ordered by point index.

        Level 0 is the single point (-1/2, ..., -1/2); higher levels must
        have been constructed (construct_level) or are built on demand.
        """
        if m < 0:
            raise ValueError("level must be >= 0")
        if m == 0:
            return np.full((1, self.dimension), -0.5)
        modulus, gens = self.construct_level(m)
        k = np.arange(1 << m)
        pts = np.empty((1 << m, self.dimension))
        for j, gen in enumerate(gens):
            pts[:, j] = _coordinate_points(k, gen, modulus, m)
        return pts - 0.5

    def export_file(self, path: str, max_level: int | None = None) -> None:
        """Write constructed generating vectors as hex bit masks.

        Header lines document the base, dimension and the modulus per level;
        data lines are ``m q_1 q_2 ... q_s``.
        """
        ms = sorted(self.levels)
        if max_level is not None:
            ms = [m for m in ms if m <= max_level]
        with open(path, "w") as fh:
            fh.write(f"# base {self.base} dimension {self.dimension}\n")
            fh.write(
                f"# weights alpha {self.weights.alpha} n {self.weights.n} c {self.weights.c!r}\n"
            )
            for m in ms:
                fh.write(f"# modulus {m} {self.levels[m][0]:#x}\n")
            for m in ms:
                gens = " ".join(f"{g:#x}" for g in self.levels[m][1])
                fh.write(f"{m} {gens}\n")

    def import_file(self, path: str) -> None:
        """Load generating vectors written by :meth:`export_file`."""
        moduli: Dict[int, int] = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if parts and parts[0] == "modulus":
                        moduli[int(parts[1])] = int(parts[2], 16)
                    continue
                parts = line.split()
                m = int(parts[0])
                gens = [int(p, 16) for p in parts[1:]]
                if len(gens) < self.dimension:
                    raise ValueError(f"level {m} has fewer generators than the dimension")
                modulus = moduli.get(m, primitive_polynomial(m))
                for g in gens:
                    if poly_mod(g, modulus) == 0:
                        raise ValueError("generator shares a factor with the modulus")
                self.levels[m] = (modulus, gens[: self.dimension])


# ---------------------------------------------------------------------------
# Averages and the two-level difference
# ---------------------------------------------------------------------------


def sample_mean(values: np.ndarray, expected_count: int | None = None) -> np.ndarray:
    """Arithmetic mean over axis 0 with deterministic pairwise summation.

    The reduction tree is fixed (adjacent pairs, halving), so the result is
    bit-identical regardless of threading or sample layout.
    """
    arr = np.asarray(values, dtype=float)
    n = arr.shape[0]
    if n == 0:
        raise ValueError("cannot average zero samples")
    if expected_count is not None and n != expected_count:
        raise ValueError(f"expected {expected_count} samples, got {n}")
    acc = arr
    while acc.shape[0] > 1:
        half = acc.shape[0] // 2
        head = acc[: 2 * half]
        acc = np.concatenate([head[0::2] + head[1::2], acc[2 * half :]], axis=0)
    return acc[0] / n


def successive_difference(level_mean, previous_mean):
    """Two-level error estimate: difference of consecutive-level averages."""
    return level_mean - previous_mean
