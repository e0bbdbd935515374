"""Virasoro operators from monodromy data, via exact Gamma-free reduction.

Two independent assembly routes are implemented:

* the bilinear route: reflection-reduced rising-factorial matrices
  ``npq`` contracted against the oscillator realization, order by order in
  the spectral parameter;
* the product route: nilpotent-shift components of the matrix polynomial
  ``pm_matrix`` contracted the same way.

Both produce coefficient tables (second-derivative, scaling, quadratic and
unity-branch quadratic parts plus the constant), which satisfy the Virasoro
commutation relations on finite windows and match the explicit low operators.
"""

from __future__ import annotations

import math
from fractions import Fraction

from .extension import ExtendedManifold

__all__ = [
    "component_projection", "npq", "pm_matrix", "cpq_series",
    "VirasoroOperator", "build_operator", "commutator", "operators_equal",
    "VirasoroError",
]


class VirasoroError(Exception):
    pass


def _sign(k):
    """(-1)^k as an exact integer for any integer k."""
    return -1 if k % 2 else 1


# -- polynomial-in-nu helpers (coefficient lists, low degree) -----------------


def _poly_mul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x:
            for j, y in enumerate(b):
                if y:
                    out[i + j] += x * y
    while len(out) > 1 and not out[-1]:
        out.pop()
    return out


def _poly_add(a, b):
    out = [Fraction(0)] * max(len(a), len(b))
    for i, x in enumerate(a):
        out[i] += x
    for i, x in enumerate(b):
        out[i] += x
    while len(out) > 1 and not out[-1]:
        out.pop()
    return out


def _poly_diff(a):
    return [i * a[i] for i in range(1, len(a))] or [Fraction(0)]


def _linear(c0):
    """c0 + nu as a coefficient list."""
    return [Fraction(c0), Fraction(1)]


def poch_product(x0, a, b):
    """Polynomial in nu: poch(x + 1/2, a) * poch(1/2 - x, b) at x = x0 + nu.

    Defined (a polynomial) whenever a + b >= 0; otherwise the pole regime.
    """
    x0 = Fraction(x0)
    if a >= 0 and b >= 0:
        out = [Fraction(1)]
        for j in range(a):
            out = _poly_mul(out, _linear(x0 + Fraction(1, 2) + j))
        for j in range(b):
            neg = [Fraction(1, 2) - x0 + j, Fraction(-1)]
            out = _poly_mul(out, neg)
        return out
    if a < 0 <= b:
        if b < -a:
            raise VirasoroError("pole regime in the reflection product")
        out = [Fraction(1)]
        for j in range(-a, b):
            # factor (x - 1/2 - j), overall sign (-1)^b
            out = _poly_mul(out, [x0 - Fraction(1, 2) - j, Fraction(1)])
        sign = Fraction((-1) ** b)
        return [sign * c for c in out]
    if b < 0 <= a:
        if a < -b:
            raise VirasoroError("pole regime in the reflection product")
        out = [Fraction(1)]
        for j in range(-b, a):
            out = _poly_mul(out, [x0 + Fraction(1, 2) + j, Fraction(1)])
        sign = Fraction((-1) ** (-b))
        return [sign * c for c in out]
    raise VirasoroError("pole regime: both factor lengths negative")


def _mat_mul(a, b):
    n = len(a)
    return [[sum(a[i][k] * b[k][j] for k in range(n)) for j in range(n)]
            for i in range(n)]


def _nilpotent_powers(R):
    """[I, R, R^2, ...] until zero."""
    n = len(R)
    out = [[[Fraction(int(i == j)) for j in range(n)] for i in range(n)]]
    cur = R
    while any(any(row) for row in cur):
        out.append(cur)
        cur = _mat_mul(cur, R)
        if len(out) > n + 1:
            raise VirasoroError("R is not nilpotent")
    return out


def component_projection(P, mu, s):
    """Eigenvalue-shift component [P]_s of a matrix against diagonal mu."""
    n = len(P)
    return [[P[i][j] if mu[i] - mu[j] == s else Fraction(0) for j in range(n)]
            for i in range(n)]


def npq(mu, R, p, q, s):
    """Reflection-reduced bilinear matrix N_{p,q}(s; nu), as nu-polynomials.

    Entry (i, j) is sum_k ([R^k]_s)_{ij} d^k/dnu^k f(mu_j + nu) / k!, where f
    is the rising-factorial product with lengths p+s+1 and q+1.  Polynomial
    whenever p+q+s+3 >= 1; the pole regime raises.
    """
    n = len(mu)
    powers = _nilpotent_powers(R)
    out = [[[Fraction(0)] for _ in range(n)] for _ in range(n)]
    base = {}
    for j in range(n):
        base[j] = poch_product(mu[j], p + s + 1, q + 1)
    for k, Rk in enumerate(powers):
        comp = component_projection(Rk, mu, s)
        if not any(any(row) for row in comp):
            continue
        fact = Fraction(1, math.factorial(k))
        for j in range(n):
            fj = base[j]
            for _ in range(k):
                fj = _poly_diff(fj)
            for i in range(n):
                if comp[i][j]:
                    out[i][j] = _poly_add(out[i][j], [comp[i][j] * fact * c for c in fj])
    return out


def npq_at_zero(mu, R, p, q, s):
    return [[c[0] for c in row] for row in npq(mu, R, p, q, s)]


def pm_matrix(mu, R, m, shift, s):
    """Component [P_m(mu - shift, R)]_s of the nilpotent-shift product.

    P_m(mu, R) = e^{R d/dx} prod_{j=0..m} (x + mu + j - 1/2) at x = 0 for
    m >= 0, and the identity for m = -1.
    """
    n = len(mu)
    powers = _nilpotent_powers(R)
    if m == -1:
        return component_projection(powers[0], mu, s)
    polys = {}
    for b in range(n):
        poly = [Fraction(1)]
        for j in range(m + 1):
            poly = _poly_mul(poly, [mu[b] - shift + j - Fraction(1, 2), Fraction(1)])
        polys[b] = poly
    out = [[Fraction(0)] * n for _ in range(n)]
    for k, Rk in enumerate(powers):
        comp = component_projection(Rk, mu, s)
        if not any(any(row) for row in comp):
            continue
        for b in range(n):
            poly = polys[b]
            dk = poly
            for _ in range(k):
                dk = _poly_diff(dk)
            val = dk[0] / math.factorial(k)
            if val:
                for a in range(n):
                    if comp[a][b]:
                        out[a][b] += comp[a][b] * val
    return out


def cpq_series(charge, c_consts, p, q):
    """Unity-branch quadratic corrections: {m: C_{m;p,q}} (usually empty).

    Nonzero only for negative odd integer charge with p+q <= charge-1.
    """
    d = Fraction(charge)
    if d >= 0 or d.denominator != 1 or int(d) % 2 == 0:
        return {}
    cd = Fraction(c_consts.get(int(d) - 1, 0))
    if cd == 0 or p + q > int(d) - 1:
        return {}
    dd = int(d)
    m = dd - 1 - p - q
    total = Fraction(0)
    for k in range(0, dd - 1 - p - q + 1):
        t1 = _rising(Fraction(p) - d / 2 + Fraction(1, 2), k)
        t2 = _rising(Fraction(q) - d / 2 + Fraction(1, 2), dd - 1 - p - q - k)
        total += Fraction(_sign(k)) * t1 * t2
    val = Fraction(_sign(p)) * cd / 2 * total
    return {m: val} if val else {}


def _rising(x, k):
    out = Fraction(1)
    for j in range(k):
        out *= x + j
    return out


# -- operator tables -----------------------------------------------------------


class VirasoroOperator:
    """Coefficient tables of one operator on an index window.

    ``a``: {(ip, jq) sorted: coeff} second-derivative part,
    ``b``: {(t_ip, d_jq): coeff} scaling part,
    ``c``: {(ip, jq) sorted: coeff} quadratic part,
    ``C``: {(p, q) sorted: coeff} extra unity-branch quadratic part,
    ``const``: the constant.
    Indices ip = (branch, level) with branch 0..n.
    """

    def __init__(self, m, n, wmin, wmax):
        self.m = m
        self.n = n
        self.wmin = wmin
        self.wmax = wmax
        self.a = {}
        self.b = {}
        self.c = {}
        self.C = {}
        self.const = Fraction(0)

    def in_window(self, ip):
        i, p = ip
        lo = self.wmin if i == 0 else 0
        return lo <= p <= self.wmax

    def add_a(self, ip, jq, val):
        if val and self.in_window(ip) and self.in_window(jq):
            key = tuple(sorted((ip, jq)))
            self.a[key] = self.a.get(key, Fraction(0)) + val
            if not self.a[key]:
                del self.a[key]

    def add_b(self, t_ip, d_jq, val):
        if val and self.in_window(t_ip) and self.in_window(d_jq):
            key = (t_ip, d_jq)
            self.b[key] = self.b.get(key, Fraction(0)) + val
            if not self.b[key]:
                del self.b[key]

    def add_c(self, ip, jq, val):
        if val and self.in_window(ip) and self.in_window(jq):
            key = tuple(sorted((ip, jq)))
            self.c[key] = self.c.get(key, Fraction(0)) + val
            if not self.c[key]:
                del self.c[key]

    def add_C(self, p, q, val):
        if val and self.in_window((0, p)) and self.in_window((0, q)):
            key = tuple(sorted((p, q)))
            self.C[key] = self.C.get(key, Fraction(0)) + val
            if not self.C[key]:
                del self.C[key]

    def quadratic_total(self):
        """c-table with the unity-branch extras folded in."""
        out = dict(self.c)
        for (p, q), v in self.C.items():
            key = tuple(sorted(((0, p), (0, q))))
            out[key] = out.get(key, Fraction(0)) + v
            if not out[key]:
                del out[key]
        return out

    def b_coefficient(self, t_ip, d_jq):
        return self.b.get((t_ip, d_jq), Fraction(0))

    def scaled(self, factor):
        out = VirasoroOperator(self.m, self.n, self.wmin, self.wmax)
        out.a = {k: v * factor for k, v in self.a.items()}
        out.b = {k: v * factor for k, v in self.b.items()}
        out.c = {k: v * factor for k, v in self.c.items()}
        out.C = {k: v * factor for k, v in self.C.items()}
        out.const = self.const * factor
        return out

    def structure_relation_check(self, mu, charge):
        """The three structural constraints on the generated coefficients."""
        m = self.m
        for (ip, jq) in self.a:
            if ip[0] == 0 or jq[0] == 0:
                raise VirasoroError(f"second-derivative entry on unity branch: {ip},{jq}")
        for ((i, p), (j, q)), val in self.b.items():
            if j == 0 and not (i == 0 and q == p + m):
                raise VirasoroError(f"unity-branch scaling violates support: "
                                    f"({i},{p})->({j},{q})")
        for i in range(0, self.n + 1):
            mu_i = -Fraction(charge) / 2 if i == 0 else mu[i - 1]
            lo = self.wmin if i == 0 else 0
            for p in range(lo, self.wmax + 1):
                if not self.in_window((i, p + m)):
                    continue
                want = _rising(p + mu_i + Fraction(1, 2), m + 1)
                got = self.b_coefficient((i, p), (i, p + m))
                if got != want:
                    raise VirasoroError(
                        f"diagonal scaling coefficient differs at ({i},{p}): "
                        f"{got} != {want}")


def _realize(n, eta_inv, i, p):
    """Oscillator slot -> list of (kind, (branch, level), factor)."""
    if i == 0:
        return [("t", (0, -p - 1), Fraction(_sign(p + 1)))]
    if i == n + 1:
        return [("d", (0, p), Fraction(1))]
    if p >= 0:
        return [("d", (b + 1, p), Fraction(eta_inv[i - 1][b]))
                for b in range(n) if eta_inv[i - 1][b]]
    return [("t", (i, -p - 1), Fraction(_sign(p + 1)))]


def _slot_possible(n, i, p, wmin, wmax):
    if i == 0:
        return -wmax - 1 <= p <= -wmin - 1
    if i == n + 1:
        return wmin <= p <= wmax
    if p >= 0:
        return p <= wmax
    return -p - 1 <= wmax


def build_operator(ext: ExtendedManifold, m, wmin, wmax, route="bilinear"):
    """Assemble one operator's coefficient tables on a window."""
    base = ext.base
    n = base.n
    mt = ext.manifold
    mu_t = mt.mu
    eta_t = mt.eta
    Rsum = [[sum((mat[i][j] for mat in mt.R.values()), Fraction(0))
             for j in range(n + 2)] for i in range(n + 2)]
    smax = int(max(mu_t) - min(mu_t))
    op = VirasoroOperator(m, n, wmin, wmax)
    lo = min(-wmax - 1, wmin)
    hi = max(wmax, -wmin - 1)
    for s in range(0, smax + 1):
        for p in range(lo, hi + 1):
            q = m - 1 - s - p
            if q < lo or q > hi:
                continue
            if route == "bilinear":
                N = npq_at_zero(mu_t, Rsum, p, q, s)
                M = _mat_mul(eta_t, N)
                pref = Fraction(1, 2)
                first, second = p, q
            else:
                M = _mat_mul(eta_t, pm_matrix(mu_t, Rsum, m, Fraction(p), s))
                pref = Fraction(_sign(p + 1), 2)
                first, second = q, p
            for i in range(n + 2):
                if not _slot_possible(n, i, first, wmin, wmax):
                    continue
                for j in range(n + 2):
                    if not M[i][j]:
                        continue
                    if not _slot_possible(n, j, second, wmin, wmax):
                        continue
                    for k1, idx1, f1 in _realize(n, base.eta_inv, i, first):
                        for k2, idx2, f2 in _realize(n, base.eta_inv, j, second):
                            val = pref * M[i][j] * f1 * f2
                            if k1 == "d" and k2 == "d":
                                op.add_a(idx1, idx2, val)
                            elif k1 == "t" and k2 == "t":
                                op.add_c(idx1, idx2, val)
                            elif k1 == "t":
                                op.add_b(idx1, idx2, val)
                            else:
                                op.add_b(idx2, idx1, val)
    # unity-branch quadratic extras and the constant
    c_consts = dict(base.c_consts)
    c_consts.update(ext.h.c_realized)
    for p in range(wmin, wmax + 1):
        for q in range(p, wmax + 1):
            val = cpq_series(base.charge, c_consts, p, q).get(m, Fraction(0))
            if p != q:
                val += cpq_series(base.charge, c_consts, q, p).get(m, Fraction(0))
            if val:
                op.add_C(p, q, val)
    if m == 0:
        op.const = sum((Fraction(1, 4) - mu_a ** 2 for mu_a in base.mu),
                       Fraction(0)) / 4
    return op


def commutator(A: VirasoroOperator, B: VirasoroOperator, wmin, wmax):
    """[A, B] as coefficient tables restricted to a window.

    Tables are unordered-key quadratic data; the bracket rules below are the
    full symmetric expansions, so diagonal keys come out right automatically.
    """
    out = VirasoroOperator(None, A.n, wmin, wmax)
    ca = A.quadratic_total()
    cb = B.quadratic_total()

    def bracket_ab(a_tbl, b_tbl, sign):
        # [dd_{IJ}, t^K d_L] = delta_{KI} dd_{JL} + delta_{KJ} dd_{IL}
        for (I, J), v1 in a_tbl.items():
            for (K, L), v2 in b_tbl.items():
                if K == I:
                    out.add_a(J, L, sign * v1 * v2)
                if K == J:
                    out.add_a(I, L, sign * v1 * v2)

    def bracket_ac(a_tbl, c_tbl, sign):
        # [dd_{IJ}, t^K t^L] = d_{IK}d_{JL} + d_{IL}d_{JK}
        #                      + d_{IK} t^L d_J + d_{IL} t^K d_J
        #                      + d_{JK} t^L d_I + d_{JL} t^K d_I
        for (I, J), v1 in a_tbl.items():
            for (K, L), v2 in c_tbl.items():
                v = sign * v1 * v2
                if I == K and J == L:
                    out.const += v
                if I == L and J == K:
                    out.const += v
                if I == K:
                    out.add_b(L, J, v)
                if I == L:
                    out.add_b(K, J, v)
                if J == K:
                    out.add_b(L, I, v)
                if J == L:
                    out.add_b(K, I, v)

    def bracket_bc(b_tbl, c_tbl, sign):
        # [t^I d_J, t^K t^L] = d_{JK} t^I t^L + d_{JL} t^I t^K
        for (I, J), v1 in b_tbl.items():
            for (K, L), v2 in c_tbl.items():
                v = sign * v1 * v2
                if J == K:
                    out.add_c(I, L, v)
                if J == L:
                    out.add_c(I, K, v)

    # [b, b]
    for (I, J), v1 in A.b.items():
        for (K, L), v2 in B.b.items():
            if J == K:
                out.add_b(I, L, v1 * v2)
            if L == I:
                out.add_b(K, J, -v1 * v2)
    bracket_ab(A.a, B.b, 1)
    bracket_ab(B.a, A.b, -1)
    bracket_ac(A.a, cb, 1)
    bracket_ac(B.a, ca, -1)
    bracket_bc(A.b, cb, 1)
    bracket_bc(B.b, ca, -1)
    return out


def euler_power_identity_check(ext, table, op: VirasoroOperator, pairs):
    """Directional derivative of two-point entries along a power of the
    Euler field equals the quadratic form built from the operator tables.

    ``pairs`` is an iterable of ((i,p),(j,q)); the power is op.m + 1.
    """
    h = ext.h
    m0 = ext.base
    ctx = m0.ctx
    n = m0.n
    U = m0.u_operator()
    power = [comp for comp in m0.unity()]
    for _ in range(op.m + 1):
        power = [sum((U.data[a][b] * power[b] for b in range(n)), ctx.zero())
                 for a in range(n)]
    c_consts = dict(m0.c_consts)
    c_consts.update(h.c_realized)
    for (ip, jq) in pairs:
        i, p = ip
        j, q = jq
        val = table.get(i, p, j, q)
        lhs = sum((power[a] * val.diff(m0.coords[a]) for a in range(n)), ctx.zero())
        rhs = ctx.zero()
        # table entries hold unordered sums: off-diagonal keys carry both
        # orders of the display's symmetric coefficients, diagonal keys one
        for (K, L), va in op.a.items():
            t1 = table.get(i, p, *K) * table.get(*L, j, q)
            if K == L:
                rhs = rhs + 2 * va * t1
            else:
                rhs = rhs + va * (t1 + table.get(i, p, *L) * table.get(*K, j, q))
        for ((ti, tp), (dk, dr)), vb in op.b.items():
            if (ti, tp) == ip:
                rhs = rhs + vb * table.get(dk, dr, j, q)
            if (ti, tp) == jq:
                rhs = rhs + vb * table.get(i, p, dk, dr)
        key = tuple(sorted((ip, jq)))
        vc = op.c.get(key, Fraction(0))
        rhs = rhs + (2 * vc if ip == jq else vc)
        if i == 0 and j == 0:
            vC = cpq_series(m0.charge, c_consts, p, q).get(op.m, Fraction(0))
            rhs = rhs + 2 * vC
        if not (lhs - rhs).is_zero():
            raise VirasoroError(
                f"Euler-power identity fails for m={op.m} at ({i},{p};{j},{q}): "
                f"{(lhs - rhs).canonical()}")
    return True


def operators_equal(A: VirasoroOperator, B: VirasoroOperator, wmin, wmax):
    """Exact table equality on a common window (quadratics compared folded)."""

    def window(ip):
        i, p = ip
        lo = wmin if i == 0 else 0
        return lo <= p <= wmax

    for tbl_a, tbl_b in ((A.a, B.a), (A.b, B.b),
                         (A.quadratic_total(), B.quadratic_total())):
        keys = set(tbl_a) | set(tbl_b)
        for k in keys:
            if not (window(k[0]) and window(k[1])):
                continue
            if tbl_a.get(k, Fraction(0)) != tbl_b.get(k, Fraction(0)):
                return False, (k, tbl_a.get(k, Fraction(0)), tbl_b.get(k, Fraction(0)))
    if A.const != B.const:
        return False, ("const", A.const, B.const)
    return True, None
