"""Periods, Gram data, loop-equation assembly and the genus-by-genus solver.

The spectral-parameter structure of every term is reduced to an exact
partial-fraction basis (powers of the spectral variable, powers of the
pencil-determinant atom with numerator degree below its degree, and the
square-root parity), so coefficient extraction and the linear solves are
exact rational algebra.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

from .hierarchy import Hierarchy
from .manifold import CheckFailure, GFManifold
from .symcore import DivisionError_, ExprMatrix, SymExpr, linear_solve
from .taustruct import OmegaTable
from .virasoro import npq_at_zero


class LoopError(Exception):
    pass


class PeriodBasis:
    """Derivative data of a basis of periods plus its constant Gram matrix.

    ``dv[a][g]`` is the coordinate derivative of period a along coordinate g;
    ``dlambda[a]`` its spectral-parameter derivative; ``gram`` the constant
    pairing normalized so that contraction happens with upper indices.
    """

    def __init__(self, m: GFManifold, dv, dlambda, gram, p_exprs=None):
        self.m = m
        self.ctx = m.ctx
        self.n = m.n
        self.dv = [[m.ctx.expr(x) for x in row] for row in dv]
        self.dlambda = [m.ctx.expr(x) for x in dlambda]
        self.gram = [[Fraction(x) if not isinstance(x, str) else Fraction(x)
                      for x in row] for row in gram]
        self.p_exprs = ([m.ctx.expr(x) for x in p_exprs] if p_exprs else None)
        self.lam = m.ctx._gen("lam")

    @classmethod
    def from_fixture(cls, m: GFManifold):
        data = m.period_data
        if not data:
            raise LoopError(f"manifold {m.name} carries no period data")
        return cls(m, data["dv"], data["dlambda"], data["gram"],
                   data.get("p"))

    def grad(self, a):
        """Upper components of the metric gradient of period a."""
        return [sum((self.ctx.const(self.m.eta_inv[g][b]) * self.dv[a][b]
                     for b in range(self.n)), self.ctx.zero())
                for g in range(self.n)]

    def scaled(self, factors):
        """Rescaled basis (the Gram transforms inversely)."""
        inv2 = [[self.gram[a][b] / (factors[a] * factors[b])
                 for b in range(self.n)] for a in range(self.n)]
        return PeriodBasis(
            self.m,
            [[x * factors[a] for x in self.dv[a]] for a in range(self.n)],
            [self.dlambda[a] * factors[a] for a in range(self.n)],
            inv2,
            [p * factors[a] for a, p in enumerate(self.p_exprs)]
            if self.p_exprs else None)

    def mixed(self, matrix):
        """New basis p'_a = sum_b matrix[a][b] p_b with the transformed Gram."""
        n = self.n
        mat = [[Fraction(x) for x in row] for row in matrix]
        gram_low = _rat_inverse(self.gram)
        new_low = [[sum(mat[a][x] * gram_low[x][y] * mat[b][y]
                        for x in range(n) for y in range(n))
                    for b in range(n)] for a in range(n)]
        return PeriodBasis(
            self.m,
            [[sum((self.dv[x][g] * mat[a][x] for x in range(n)), self.ctx.zero())
              for g in range(n)] for a in range(n)],
            [sum((self.dlambda[x] * mat[a][x] for x in range(n)), self.ctx.zero())
             for a in range(n)],
            _rat_inverse(new_low),
            None)


def _rat_inverse(mat):
    from .manifold import _rat_inv
    return _rat_inv([[Fraction(x) for x in row] for row in mat])


# -- Gauss-Manin system and Gram -----------------------------------------------


def _resolvent(m: GFManifold):
    """(U - lam I)^{-1} over the generator ring."""
    ctx = m.ctx
    lam = ctx.var("lam")
    u = m.u_operator()
    shifted = ExprMatrix(ctx, [[u.data[i][j] - (lam if i == j else ctx.zero())
                                for j in range(m.n)] for i in range(m.n)])
    return shifted, shifted.inverse()


def gauss_manin_check(m: GFManifold, basis: PeriodBasis):
    """Both defining equations plus the unity-direction corollary."""
    ctx = m.ctx
    n = m.n
    _, res = _resolvent(m)
    e = m.unity()
    for a in range(n):
        grad = basis.grad(a)
        half = [(m.mu[g] + Fraction(1, 2)) * grad[g] for g in range(n)]
        for gamma in range(n):
            cg = m.c_operator(gamma)
            chalf = [sum((cg.data[i][j] * half[j] for j in range(n)), ctx.zero())
                     for i in range(n)]
            rhs = [-sum((res.data[i][j] * chalf[j] for j in range(n)), ctx.zero())
                   for i in range(n)]
            for i in range(n):
                if not (grad[i].diff(m.coords[gamma]) - rhs[i]).is_zero():
                    raise CheckFailure(
                        f"first period equation fails: period {a}, "
                        f"direction {gamma}, component {i}")
        rhs = [sum((res.data[i][j] * half[j] for j in range(n)), ctx.zero())
               for i in range(n)]
        for i in range(n):
            if not (grad[i].diff(basis.lam) - rhs[i]).is_zero():
                raise CheckFailure(
                    f"second period equation fails: period {a}, component {i}")
        for i in range(n):
            lhs = grad[i].diff(basis.lam)
            de = sum((e[g] * grad[i].diff(m.coords[g]) for g in range(n)), ctx.zero())
            if not (lhs + de).is_zero():
                raise CheckFailure(f"unity-direction corollary fails: period {a}")
    return True


def gram_compute(m: GFManifold, basis: PeriodBasis):
    """Pairing through eta (U - lam): must be constant; returns its inverse."""
    ctx = m.ctx
    n = m.n
    shifted, _ = _resolvent(m)
    low = [[None] * n for _ in range(n)]
    for a in range(n):
        ga = basis.grad(a)
        for b in range(n):
            gb = basis.grad(b)
            val = ctx.zero()
            for i in range(n):
                for j in range(n):
                    for k in range(n):
                        if m.eta[i][j]:
                            val = val + ga[i] * m.eta[i][j] * shifted.data[j][k] * gb[k]
            if not val.is_const():
                raise CheckFailure(f"Gram pairing not constant at ({a},{b})", val)
            low[a][b] = val.const_value()
    return _rat_inverse(low)


def quasi_homog_check(m: GFManifold, basis: PeriodBasis):
    """Scaling conditions; the first is automatic, the second is the content."""
    ctx = m.ctx
    lam = basis.lam
    lam_v = ctx.var(lam)
    for a in range(m.n):
        grad = basis.grad(a)
        for i in range(m.n):
            val = m.euler_applied(grad[i]) + lam_v * grad[i].diff(lam)
            val = val + (m.mu[i] + Fraction(1, 2)) * grad[i]
            if not val.is_zero():
                raise CheckFailure(f"gradient scaling fails: period {a} comp {i}")
        dl = basis.dlambda[a]
        val = m.euler_applied(dl) + lam_v * dl.diff(lam) \
            + (1 + m.charge) / 2 * dl
        if not val.is_zero():
            raise CheckFailure(f"spectral scaling fails: period {a}", val)
    return True


def quasi_homog_fix(m: GFManifold, basis: PeriodBasis):
    """Absorb the scaling ambiguity when the second condition fails.

    The residual is a function of the spectral parameter alone; the
    correction solves the associated first-order scaling equation monomial
    by monomial.
    """
    ctx = m.ctx
    lam = basis.lam
    lam_v = ctx.var(lam)
    new_dl = []
    changed = False
    for a in range(m.n):
        dl = basis.dlambda[a]
        res = m.euler_applied(dl) + lam_v * dl.diff(lam) + (1 + m.charge) / 2 * dl
        if res.is_zero():
            new_dl.append(dl)
            continue
        for g in m.coords:
            if not res.diff(g).is_zero():
                raise LoopError("scaling residual depends on the coordinates")
        fix = ctx.zero()
        for e, coeff in res.coefficient_map(lam).items():
            denom = e + (1 + m.charge) / 2
            if denom == 0:
                raise LoopError("resonant scaling residual cannot be absorbed")
            fix = fix + coeff * lam_v ** e / denom
        new_dl.append(dl - fix)
        changed = True
    out = PeriodBasis(m, basis.dv, new_dl, basis.gram, basis.p_exprs)
    if changed:
        quasi_homog_check(m, out)
    return out


def euler_scaling_normal_check(m: GFManifold, basis: PeriodBasis):
    """For charge != 1 with explicit periods: the full scaling of p is zero."""
    if basis.p_exprs is None:
        return None
    ctx = m.ctx
    lam = basis.lam
    for a in range(m.n):
        p = basis.p_exprs[a]
        val = m.euler_applied(p) + ctx.var(lam) * basis.dlambda[a] \
            + (m.charge - 1) / 2 * p
        if not val.is_const():
            raise CheckFailure(f"full scaling of period {a} not constant")
        if m.charge != 1 and val.const_value() != 0:
            raise CheckFailure(f"full scaling of period {a} not normalized")
    return True


def quasi_period(m: GFManifold, basis: PeriodBasis):
    """The extra potential whose gradient closes the enlarged period basis.

    Returns (Y components, Q or None).  For charge 1 any quasi-homogeneous
    period works and the first basis element is used.
    """
    ctx = m.ctx
    n = m.n
    lam_v = ctx.var(basis.lam)
    if m.charge == 1:
        return basis.grad(0), None
    # Y = -lam^{(d-1)/2} P G (d_E + lam d_lam) p  -- needs p itself
    if basis.p_exprs is None:
        raise LoopError("quasi-period needs explicit period expressions")
    half = m.charge - 1
    if half % 2 != 0:
        raise LoopError("odd half-power of the spectral variable not wired")
    lam_pow = lam_v ** (int(half) // 2)
    scal = [m.euler_applied(p) + lam_v * basis.dlambda[a]
            for a, p in enumerate(basis.p_exprs)]
    Y = []
    for g in range(n):
        val = ctx.zero()
        for a in range(n):
            for b in range(n):
                if basis.gram[a][b]:
                    val = val + basis.grad(a)[g] * basis.gram[a][b] * scal[b]
        Y.append(-lam_pow * val)
    from .manifold import integrate_gradient
    low = [sum((ctx.const(m.eta[g][b]) * Y[b] for b in range(n)), ctx.zero())
           for g in range(n)]
    Q = integrate_gradient(ctx, low, m.coords)
    return Y, Q


# -- series route for the star product -----------------------------------------


def star_product_series(h: Hierarchy, table: OmegaTable, order):
    """lambda-expansion of the half-Gram star square of the spectral
    derivative of the period row, with exact reflection-reduced
    coefficients.  Returns {power m: coefficient} for lam^{-(m+2)}."""
    m0 = h.m
    n = m0.n
    Rsum = [[sum((mat[i][j] for mat in m0.R.values()), Fraction(0))
             for j in range(n)] for i in range(n)]
    spread = int(max(m0.mu) - min(m0.mu)) if n > 1 else 0
    out = {}
    for mm in range(-1, order + 1):
        total = h.ctx.zero()
        for s in range(0, spread + 1):
            for p in range(0, mm - s + 2):
                q = mm - 1 - s - p
                if q < 0:
                    continue
                N = npq_at_zero(m0.mu, Rsum, p, q, s)
                for a in range(n):
                    for b in range(n):
                        coef = sum(N[a][x] * m0.eta_inv[x][b] for x in range(n))
                        if coef:
                            total = total + coef * table.get(a + 1, p, b + 1, q)
        out[mm] = -total / 2
    return out


def lambda_series_of(m: GFManifold, expr, pencil_atom, order):
    """Expand an expression rational in lam and the pencil atom as a series
    in 1/lam down to lam^{-order}."""
    ctx = m.ctx
    lam = ctx._gen("lam")
    atom = ctx.atom_by_name[pencil_atom]
    # atom = (-1)^k lam^k (1 + lower order); write atom = c_k lam^k (1 + B)
    poly = atom.poly
    by_lam = poly.coefficient_map(lam)
    k = max(by_lam)
    ck = by_lam[k]
    if not ck.is_const():
        raise LoopError("pencil atom has non-constant leading spectral power")
    ckv = ck.const_value()
    inv_lam = ctx.var(lam).invert()
    B = ctx.zero()
    for e, c in by_lam.items():
        if e != k:
            B = B + c * inv_lam ** (k - e) / ckv
    series = {}
    for mono, coeff in expr.terms.items():
        e_lam = 0
        rest = []
        for g, ee in mono:
            if g == lam.index:
                e_lam = ee
            else:
                rest.append((g, ee))
        base = SymExpr(ctx, {tuple(rest): coeff}, ())
        mpow = dict(expr.den).get(atom.index, 0)
        # 1/atom^m = lam^{-km} ck^{-m} (1+B)^{-m}
        out = base * inv_lam ** (k * mpow - e_lam) / ckv ** mpow
        geom = ctx.one()
        # (1+B)^{-m} truncated
        depth = order + k * mpow + abs(e_lam) + 2
        term = ctx.one()
        for j in range(1, depth + 1):
            term = term * (-B)
            geom = geom + ctx.const(math.comb(mpow + j - 1, j)) * (-1) ** 0 * term \
                if False else geom
        # simple power: expand (1+B)^{-m} via binomial series in B
        acc = ctx.one()
        powB = ctx.one()
        for j in range(1, depth + 1):
            powB = powB * B
            if powB.is_zero():
                break
            coefb = Fraction(math.comb(mpow + j - 1, j) * (-1) ** j)
            acc = acc + coefb * powB
        out = out * acc
        for e, c in out.coefficient_map(lam).items():
            if e >= -order:
                series[e] = series.get(e, ctx.zero()) + c
    series = {e: c for e, c in series.items() if not c.is_zero()}
    # drop incomplete tail orders conservatively
    return series


# -- partial fractions ----------------------------------------------------------


def lambda_structures(m: GFManifold, expr, pencil_atom, sqrt_gen=None):
    """Exact partial fractions of an expression in the spectral variable.

    Returns {(sigma, kind, j, i): coefficient} with kind "lam" (structure
    lam^j) or "atom" (structure lam^i / atom^j, 0 <= i < deg), sigma the
    square-root parity.  Coefficients are free of the spectral variable."""
    ctx = m.ctx
    lam = ctx._gen("lam")
    atom = ctx.atom_by_name[pencil_atom]
    sq = ctx._gen(sqrt_gen) if sqrt_gen else None
    by_lam_atom = atom.poly.coefficient_map(lam)
    deg = max(by_lam_atom)
    a0 = atom.poly.subs({lam: 0})
    inv_a0 = a0.invert()
    p1 = ctx.zero()  # (atom - atom(0)) / lam
    for e, c in by_lam_atom.items():
        if e >= 1:
            p1 = p1 + c * ctx.var(lam) ** (e - 1)

    mpow = dict(expr.den).get(atom.index, 0)
    other_den = tuple((a, e) for a, e in expr.den if a != atom.index)
    out = {}

    def emit(sigma, kind, j, i, coeff):
        key = (sigma, kind, j, i)
        cur = out.get(key)
        out[key] = coeff if cur is None else cur + coeff

    work = []
    for mono, coeff in expr.terms.items():
        e_lam, sigma = 0, 0
        rest = []
        for g, ee in mono:
            if g == lam.index:
                e_lam = ee
            elif sq is not None and g == sq.index:
                sigma = ee
            else:
                rest.append((g, ee))
        base = SymExpr(ctx, {tuple(rest): coeff}, other_den, _normalized=False)
        work.append((sigma, e_lam, mpow, base))
    guard = 0
    while work:
        guard += 1
        if guard > 200000:
            raise LoopError("partial fraction reduction does not terminate")
        sigma, e, mp, coeff = work.pop()
        if coeff.is_zero():
            continue
        if mp == 0:
            emit(sigma, "lam", e, 0, coeff)
            continue
        if e < 0:
            # lam^e / atom^mp = 1/a0 (lam^e/atom^{mp-1} - lam^{e+1} P1 /atom^mp)
            work.append((sigma, e, mp - 1, coeff * inv_a0))
            for ee, cc in (p1 * coeff * inv_a0).coefficient_map(lam).items():
                work.append((sigma, e + 1 + ee, mp, -cc))
            continue
        if e >= deg:
            # divide lam^e by atom once: lam^e = lam^{e-deg}(atom - lower)/c_deg
            cdeg = by_lam_atom[deg]
            inv_c = cdeg.invert()
            work.append((sigma, e - deg, mp - 1, coeff * inv_c))
            for ee, cc in by_lam_atom.items():
                if ee < deg:
                    work.append((sigma, e - deg + ee, mp, -coeff * cc * inv_c))
            continue
        emit(sigma, "atom", mp, e, coeff)
    return {k: v for k, v in out.items() if not v.is_zero()}


# -- the loop system -------------------------------------------------------------


class LoopSystem:
    """All spectral-parameter kernels of the loop equation for one manifold."""

    def __init__(self, m: GFManifold, h: Hierarchy, basis: PeriodBasis,
                 jet_order, pencil_atom, sqrt_gen=None):
        self.m = m
        self.h = h
        self.basis = basis
        self.ctx = m.ctx
        self.n = m.n
        self.S = jet_order
        self.pencil_atom = pencil_atom
        self.sqrt_gen = sqrt_gen
        lam_v = self.ctx.var("lam")
        n, ctx = self.n, self.ctx
        # exact inverse of (E - lam e) in the algebra
        e = m.unity()
        c = m.c_tensor()
        mat = ExprMatrix(ctx, [[
            sum(((m.euler[g] - lam_v * e[g]) * c[i][g][j] for g in range(n)),
                ctx.zero()) for j in range(n)] for i in range(n)])
        inv = mat.inverse()
        self.inv_euler = [sum((inv.data[g][b] * e[b] for b in range(n)), ctx.zero())
                          for g in range(n)]
        # x-derivative caches, grown on demand
        self.dx_inv = [LazyTower(self.inv_euler[g]) for g in range(n)]
        self.gradp = [basis.grad(a) for a in range(n)]
        self.dx_gradp = [[LazyTower(self.gradp[a][g]) for g in range(n)]
                         for a in range(n)]
        self.dx_dlam = [LazyTower(basis.dlambda[a]) for a in range(n)]
        self.G = basis.gram

    def lhs_multiplier(self, g, s):
        """Coefficient multiplying the (g, s) jet-derivative slot."""
        ctx, n = self.ctx, self.n
        val = (s + 1) * self.dx_inv[g][s]
        for k in range(1, s + 1):
            w = k * math.comb(s + 1, k + 1)
            for a in range(n):
                for b in range(n):
                    if self.G[a][b]:
                        val = val + w * self.G[a][b] \
                            * self.dx_gradp[a][g][s - k] * self.dx_dlam[b][k]
        return val

    def lhs_apply(self, F):
        ctx = self.ctx
        out = ctx.zero()
        for g in range(self.n):
            for s in range(0, self.S + 1):
                jet = self.ctx.jet(self.m.coords[g], s)
                d = F.diff(jet)
                if not d.is_zero():
                    out = out + d * self.lhs_multiplier(g, s)
        return out

    def reduced_lhs_multiplier(self, g, s):
        """Same slot from the intermediate form (binomial-identity cross-check)."""
        ctx, n = self.ctx, self.n
        e = self.m.unity()
        val = self.dx_inv[g][s]
        # d_e p + d_lam p per period
        depl = []
        for b in range(n):
            de = sum((e[x] * self.basis.dv[b][x] for x in range(n)), ctx.zero())
            depl.append(de + self.basis.dlambda[b])
        if s >= 1:
            inner = ctx.zero()
            for a in range(n):
                for b in range(n):
                    if self.G[a][b]:
                        inner = inner + self.gradp[a][g] * self.G[a][b] * depl[b]
            tower = _dx_tower(inner, s)
            val = val + s * tower[s]
            for k in range(1, s + 1):
                w = math.comb(s, k)
                for a in range(n):
                    for b in range(n):
                        if self.G[a][b]:
                            val = val - w * self.G[a][b] \
                                * self.dx_dlam[a][k - 1] * self.dx_gradp[b][g][s + 1 - k]
        return val

    def quadratic_kernel(self, alpha, k, beta, l):
        """(d_x^{k+1} grad-slot) G (d_x^{l+1} grad-slot)."""
        ctx, n = self.ctx, self.n
        val = ctx.zero()
        for a in range(n):
            for b in range(n):
                if self.G[a][b]:
                    val = val + self.G[a][b] * self.dx_gradp[a][alpha][k + 1] \
                        * self.dx_gradp[b][beta][l + 1]
        return val

    def cubic_kernel_vector(self):
        """[grad(dlam p) . grad(dlam p) . v_x]^alpha G, per alpha."""
        ctx, n = self.ctx, self.n
        c = self.m.c_tensor()
        grads = []
        for a in range(n):
            grads.append([sum((ctx.const(self.m.eta_inv[g][b])
                               * self.basis.dlambda[a].diff(self.m.coords[b])
                               for b in range(n)), ctx.zero()) for g in range(n)])
        vx = [ctx.var(ctx.jet(cc, 1)) for cc in self.m.coords]
        out = []
        for alpha in range(n):
            total = ctx.zero()
            for a in range(n):
                for b in range(n):
                    if not self.G[a][b]:
                        continue
                    prod = [sum((c[g][x][y] * grads[a][x] * grads[b][y]
                                 for x in range(n) for y in range(n)), ctx.zero())
                            for g in range(n)]
                    vec = sum((c[alpha][g][x] * prod[g] * vx[x]
                               for g in range(n) for x in range(n)), ctx.zero())
                    total = total + self.G[a][b] * vec
            out.append(total)
        return out

    def rhs_genus1(self, star_closed):
        """Constant right-hand side of the lowest dispersion order."""
        tr = sum((Fraction(1, 4) - x * x for x in self.m.mu), Fraction(0))
        lam_inv2 = self.ctx.var("lam").invert() ** 2
        return star_closed - tr / 4 * lam_inv2

    def rhs_next(self, F_lower):
        """Dispersion-square coefficient sourced by the previous genus."""
        ctx, n = self.ctx, self.n
        slots = {}
        for g in range(n):
            for s in range(0, self.S + 1):
                d = F_lower.diff(self.ctx.jet(self.m.coords[g], s))
                if not d.is_zero():
                    slots[(g, s)] = d
        out = ctx.zero()
        for (ga, k), da in slots.items():
            for (gb, l), db in slots.items():
                out = out + da * db * self.quadratic_kernel(ga, k, gb, l) / 2
        second = {}
        for (ga, k), da in slots.items():
            for gb in range(n):
                for l in range(0, self.S + 1):
                    dd = da.diff(self.ctx.jet(self.m.coords[gb], l))
                    if not dd.is_zero():
                        out = out + dd * self.quadratic_kernel(ga, k, gb, l) / 2
        cubic = self.cubic_kernel_vector()
        towers = [_dx_tower(cubic[a], self.S + 1) for a in range(n)]
        for (ga, k), da in slots.items():
            out = out + da * towers[ga][k + 1] / 2
        return out


class LazyTower:
    """x-derivative tower computed on demand and cached."""

    def __init__(self, expr):
        self.levels = [expr]

    def __getitem__(self, k):
        while len(self.levels) <= k:
            self.levels.append(self.levels[-1].xdiff())
        return self.levels[k]


def _dx_tower(expr, depth):
    return LazyTower(expr)


# -- twisted-period Gram identity ----------------------------------------------


class _NuAlgebra:
    """Opaque transcendental symbols for the twisted-period identity.

    Per congruence class of the grading spectrum: the Gamma value at the
    class base point (invertible), the cosine and sine there (cos invertible,
    sin^2 rewrites), and a short digamma tower driving differentiation in the
    twist parameter.  Gamma factors at negative twist are *defined* through
    the reflection identity, so all pairings cancel monomially.
    """

    def __init__(self, m: GFManifold):
        ctx = m.ctx
        self.m = m
        self.ctx = ctx
        self.nu = ctx.by_name.get("gnu") or ctx.add_generator("gnu", "parameter")
        self.pi = ctx.by_name.get("gpi") or ctx.add_generator(
            "gpi", "parameter", invertible=True)
        if "sqlam" in ctx.by_name:
            self.sqlam = ctx.by_name["sqlam"]
        else:
            self.sqlam = ctx.add_generator("sqlam", "parameter", invertible=True)
        if "loglam" in ctx.by_name:
            self.loglam = ctx.by_name["loglam"]
        else:
            self.loglam = ctx.add_generator("loglam", "parameter")
        self.reps = {}
        self.symbols = {}
        for mu in m.mu:
            cls = mu % 1
            if cls not in self.symbols:
                tag = str(cls).replace("/", "_").replace("-", "m")
                gp = ctx.add_generator(f"gamP_{tag}", invertible=True)
                cc = ctx.add_generator(f"cosC_{tag}", invertible=True)
                ss = ctx.add_generator(f"sinC_{tag}")
                ps = [ctx.add_generator(f"psi{j}_{tag}") for j in range(3)]
                ctx.set_power_rule(ss, 2, ctx.one() - ctx.var(cc) ** 2)
                ctx.set_derivative(gp, self.nu, ctx.var(gp) * ctx.var(ps[0]))
                for j in range(2):
                    ctx.set_derivative(ps[j], self.nu, ctx.var(ps[j + 1]))
                ctx.set_derivative(cc, self.nu, -ctx.var(self.pi) * ctx.var(ss))
                ctx.set_derivative(ss, self.nu, ctx.var(self.pi) * ctx.var(cc))
                self.symbols[cls] = (gp, cc, ss, ps)
        self._shift_atoms = {}

    def _nu_shift_inverse(self, const, sign):
        """1/(const + sign*nu) via a registered linear atom."""
        ctx = self.ctx
        key = (Fraction(const), sign)
        if key not in self._shift_atoms:
            tag = f"nud_{len(self._shift_atoms)}"
            expansion = ctx.const(const) + sign * ctx.var(self.nu)
            self._shift_atoms[key] = ctx.add_atom(tag, expansion)
        atom = self._shift_atoms[key]
        return SymExpr(ctx, {(): Fraction(1)}, ((atom.index, 1),))

    def _poch(self, base, sign, length):
        """prod_{j<length} (base + j + sign*nu), inverse products via atoms."""
        ctx = self.ctx
        nu = ctx.var(self.nu)
        out = ctx.one()
        if length >= 0:
            for j in range(length):
                out = out * (ctx.const(base + j) + sign * nu)
        else:
            for j in range(1, -length + 1):
                out = out * self._nu_shift_inverse(base - j, sign)
        return out

    def gamma_plus(self, mu_val, extra):
        """Gamma(extra + mu_val + nu + 1/2) reduced to the class symbol."""
        cls = mu_val % 1
        gp = self.symbols[cls][0]
        k = int(mu_val - cls)
        return self._poch(cls + Fraction(1, 2), 1, extra + k) * self.ctx.var(gp)

    def gamma_minus(self, mu_val, extra):
        """Gamma(extra + mu_val - nu + 1/2) through the reflection identity."""
        ctx = self.ctx
        dual = (-mu_val) % 1
        gp, cc, ss, ps = self.symbols[dual]
        kp = extra + mu_val + dual  # integer shift past 1/2 - dual - nu
        if kp != int(kp):
            raise LoopError("twist classes are not metric-dual")
        base = Fraction(1, 2) - dual
        return (self._poch(base, -1, int(kp)) * ctx.var(self.pi)
                * ctx.var(gp).invert() * ctx.var(cc).invert())

    def cos_factor(self, mu_val):
        """cos(pi (mu_val + nu)) as a signed class symbol."""
        cls = mu_val % 1
        cc = self.symbols[cls][1]
        k = int(mu_val - cls)
        return Fraction((-1) ** k) * self.ctx.var(cc)


def _sq_truncate(expr, alg, floor):
    """Drop terms with sqlam-exponent below floor."""
    out = {}
    idx = alg.sqlam.index
    for mono, c in expr.terms.items():
        e = 0
        for g, ee in mono:
            if g == idx:
                e = ee
        if e >= floor:
            out[mono] = c
    return SymExpr(expr.ctx, out, expr.den, _normalized=True)


def regularized_period_series(m: GFManifold, h: Hierarchy, alg: _NuAlgebra,
                              pmax, sign, floor=None):
    """Twisted-period gradient matrix as a truncated spectral series.

    Columns carry half-integer spectral powers and the nilpotent log factor;
    the overall twist-power prefactor is omitted (it cancels in every pairing
    of opposite twists).
    """
    ctx = m.ctx
    n = m.n
    Rsum = [[sum((mat[i][j] for mat in m.R.values()), Fraction(0))
             for j in range(n)] for i in range(n)] if m.R else \
        [[Fraction(0)] * n for _ in range(n)]
    from .virasoro import _nilpotent_powers
    powers = _nilpotent_powers(Rsum)
    total = [[ctx.zero() for _ in range(n)] for _ in range(n)]
    log_v = ctx.var(alg.loglam)
    sq = ctx.var(alg.sqlam)
    # lam^{-R} = sum_j (-R log)^j / j!
    lam_R = []
    for j, Rj in enumerate(powers):
        lam_R.append([[Fraction((-1) ** j, math.factorial(j)) * Rj[a][b]
                       for b in range(n)] for a in range(n)])
    for p in range(0, pmax + 1):
        for k in range(0, p + 1):
            theta = [[h.xi[(a + 1, p - k)][g] for a in range(n)] for g in range(n)]
            # gamma-factor matrix [e^{R d_nu}]_k Gamma(p + mu + sign nu + 1/2 + (shift))
            gam = [[ctx.zero() for _ in range(n)] for _ in range(n)]
            for j, Rj in enumerate(powers):
                comp = [[Rj[a][b] if m.mu[a] - m.mu[b] == k else Fraction(0)
                         for b in range(n)] for a in range(n)]
                if not any(any(row) for row in comp):
                    continue
                for b in range(n):
                    if sign > 0:
                        base = alg.gamma_plus(m.mu[b], p)
                    else:
                        base = alg.gamma_minus(m.mu[b], p)
                    d = base
                    for _ in range(j):
                        d = d.diff(alg.nu)
                    if sign < 0 and j % 2:
                        d = -d  # twist-derivative chain rule at -nu
                    for a in range(n):
                        if comp[a][b]:
                            gam[a][b] = gam[a][b] + Fraction(
                                comp[a][b], math.factorial(j)) * d
            # assemble Theta * gam * lam-diag * lam^{-R}
            for g in range(n):
                for bfin in range(n):
                    acc = ctx.zero()
                    for al in range(n):
                        for bmid in range(n):
                            if gam[al][bmid].is_zero():
                                continue
                            # lam-diagonal on index bmid
                            epow = -(2 * p + int(2 * m.mu[bmid]) + 1)
                            diagf = sq ** epow if epow >= 0 else sq.invert() ** (-epow)
                            for j, Rj in enumerate(lam_R):
                                coef = Rj[bmid][bfin]
                                if coef:
                                    acc = acc + theta[g][al] * gam[al][bmid] \
                                        * diagf * coef * log_v ** j
                    total[g][bfin] = total[g][bfin] + acc
    if floor is not None:
        total = [[_sq_truncate(e, alg, floor) for e in row] for row in total]
    return total


def gram_nu_check(m: GFManifold, h: Hierarchy, K):
    """Twisted Gram identity: pairing matrix times the closed-form inverse is
    the identity, exactly in the twist parameter, to spectral order K."""
    ctx = m.ctx
    n = m.n
    alg = _NuAlgebra(m)
    pmax = K + 2
    floor = -(2 * (K + 2) + 2)
    Pplus = regularized_period_series(m, h, alg, pmax, +1, floor=floor)
    Pminus = regularized_period_series(m, h, alg, pmax, -1, floor=floor)
    lam = ctx.var(alg.sqlam) ** 2
    u = m.u_operator()
    mid = [[sum((Fraction(m.eta[a][x]) * (u.data[x][b] - (lam if x == b else ctx.zero()))
                 for x in range(n)), ctx.zero()) for b in range(n)] for a in range(n)]
    # LHS = Pminus^T mid Pplus
    lhs = [[ctx.zero()] * n for _ in range(n)]
    for a in range(n):
        for b in range(n):
            acc = ctx.zero()
            for x in range(n):
                if Pminus[x][a].is_zero():
                    continue
                inner = ctx.zero()
                for y in range(n):
                    inner = inner + mid[x][y] * Pplus[y][b]
                acc = acc + Pminus[x][a] * _sq_truncate(inner, alg, floor)
            lhs[a][b] = _sq_truncate(acc, alg, floor)
    # G(nu) = -(1/pi) e^{R d_nu} cos(pi(mu+nu)) eta^{-1}
    from .virasoro import _nilpotent_powers
    Rsum = [[sum((mat[i][j] for mat in m.R.values()), Fraction(0))
             for j in range(n)] for i in range(n)] if m.R else \
        [[Fraction(0)] * n for _ in range(n)]
    powers = _nilpotent_powers(Rsum)
    emat = [[ctx.zero() for _ in range(n)] for _ in range(n)]
    for j, Rj in enumerate(powers):
        for a in range(n):
            for b in range(n):
                if Rj[a][b]:
                    d = alg.cos_factor(m.mu[b])
                    for _ in range(j):
                        d = d.diff(alg.nu)
                    emat[a][b] = emat[a][b] + Fraction(Rj[a][b], math.factorial(j)) * d
    pinv = ctx.var(alg.pi).invert()
    G = [[sum((-pinv * emat[a][x] * m.eta_inv[x][b] for x in range(n)), ctx.zero())
          for b in range(n)] for a in range(n)]
    ok_floor = -2 * K
    for a in range(n):
        for b in range(n):
            acc = ctx.zero()
            for x in range(n):
                acc = acc + lhs[a][x] * G[x][b]
            acc = _sq_truncate(acc, alg, floor)
            resid = acc - (1 if a == b else 0)
            bad = _check_orders(resid, alg, ok_floor)
            if bad is not None:
                raise CheckFailure(
                    f"Gram identity fails at entry ({a},{b}), spectral order "
                    f"{bad[0]}: {bad[1].canonical()[:160]}")
    return True


def _check_orders(expr, alg, ok_floor):
    """First nonzero sqlam-order at or above the reliability floor."""
    by = {}
    idx = alg.sqlam.index
    for mono, c in expr.terms.items():
        e = 0
        rest = []
        for g, ee in mono:
            if g == idx:
                e = ee
            else:
                rest.append((g, ee))
        if e >= ok_floor:
            by.setdefault(e, {})[tuple(rest)] = c
    for e in sorted(by, reverse=True):
        val = SymExpr(expr.ctx, by[e], expr.den)
        if not val.is_zero():
            return (e, val)
    return None


# -- linear extraction and solving ------------------------------------------------


def structure_rows(m: GFManifold, exprs, rhs, pencil_atom, sqrt_gen):
    """Linear system rows: one equation per (structure, monomial) pair."""
    cols = [lambda_structures(m, e, pencil_atom, sqrt_gen) for e in exprs]
    target = lambda_structures(m, rhs, pencil_atom, sqrt_gen)
    keys = set(target)
    for c in cols:
        keys.update(c)
    rows, rvec = [], []
    for key in sorted(keys):
        col_exprs = [c.get(key, m.ctx.zero()) for c in cols]
        t = target.get(key, m.ctx.zero())
        # clear denominators across this structure's equation
        den_pow = {}
        neg_pow = {}
        for e in col_exprs + [t]:
            for a, k in e.den:
                den_pow[a] = max(den_pow.get(a, 0), k)
            for mono, _ in e.terms.items():
                for g, ee in mono:
                    if ee < 0:
                        neg_pow[g] = max(neg_pow.get(g, 0), -ee)
        clear = m.ctx.one()
        for a, k in den_pow.items():
            clear = clear * m.ctx.atoms[a].poly ** k
        for g, k in neg_pow.items():
            clear = clear * m.ctx.var(m.ctx.gens[g]) ** k
        col_exprs = [e * clear for e in col_exprs]
        t = t * clear
        monos = set(t.terms)
        for e in col_exprs:
            monos.update(e.terms)
        for mono in sorted(monos):
            rows.append([e.terms.get(mono, Fraction(0)) for e in col_exprs])
            rvec.append(t.terms.get(mono, Fraction(0)))
    return rows, rvec


def genus1_solve(sys: LoopSystem, star_closed, log_candidates, linear_coords=True):
    """Genus-one solution as log/linear combination; returns (expr, report)."""
    ctx = sys.ctx
    m = sys.m
    cands = []
    labels = []
    for name in log_candidates:
        if name in ctx.atom_by_name:
            cands.append(("logatom", ctx.atom_by_name[name]))
        else:
            gen = ctx._gen(name)
            cands.append(("loggen", gen))
        labels.append(f"log({name})")
    if linear_coords:
        for ccoord in m.coords:
            cands.append(("linear", ccoord))
            labels.append(ccoord.name)
    applied = []
    for kind, obj in cands:
        if kind == "loggen":
            expr = _apply_lhs_log_gen(sys, obj)
        elif kind == "logatom":
            expr = _apply_lhs_log_atom(sys, obj)
        else:
            expr = _apply_lhs_linear(sys, obj)
        applied.append(expr)
    rhs = sys.rhs_genus1(star_closed)
    rows, rvec = structure_rows(m, applied, rhs, sys.pencil_atom, sys.sqrt_gen)
    sol = linear_solve(rows, rvec)
    if not sol.consistent:
        raise LoopError("genus-one system inconsistent: ansatz too small")
    coeffs = sol.particular
    report = {lbl: c for lbl, c in zip(labels, coeffs) if c}
    # residual check
    total = ctx.zero()
    for c, e in zip(coeffs, applied):
        if c:
            total = total + c * e
    if not (total - rhs).is_zero():
        raise LoopError("genus-one residual nonzero after solve")
    return coeffs, labels, report, sol.nullspace


def _apply_lhs_log_gen(sys: LoopSystem, gen):
    """LHS applied to log(gen): slots d log/d jet = delta/gen."""
    ctx = sys.ctx
    inv = ctx.var(gen).invert()
    out = ctx.zero()
    if gen.kind in ("coordinate", "jet"):
        g = [i for i, cc in enumerate(sys.m.coords) if cc.name == (gen.coord or gen.name)][0]
        out = out + inv * sys.lhs_multiplier(g, gen.jet_order)
    else:
        # transcendental: chain through its coordinate rules
        for d, rule in gen.derivs.items():
            dgen = ctx.gens[d]
            if dgen.kind in ("coordinate", "jet"):
                g = [i for i, cc in enumerate(sys.m.coords)
                     if cc.name == (dgen.coord or dgen.name)][0]
                out = out + rule * inv * sys.lhs_multiplier(g, dgen.jet_order)
    return out


def _apply_lhs_log_atom(sys: LoopSystem, atom):
    ctx = sys.ctx
    inv = SymExpr(ctx, {(): Fraction(1)}, ((atom.index, 1),))
    out = ctx.zero()
    for g, coord in enumerate(sys.m.coords):
        for s in range(0, sys.S + 1):
            jet = ctx.jet(coord, s)
            d = atom.poly.diff(jet)
            if not d.is_zero():
                out = out + d * inv * sys.lhs_multiplier(g, s)
    return out


def _apply_lhs_linear(sys: LoopSystem, coord):
    g = [i for i, cc in enumerate(sys.m.coords) if cc.name == coord.name][0]
    return sys.lhs_multiplier(g, 0)


def genus2_candidates(sys: LoopSystem, den_gen=None, den_atom=None, den_cap=4,
                      coeff_gens=None, max_jet=4):
    """Rational jet monomials of dispersion degree two."""
    ctx = sys.ctx
    m = sys.m
    n = sys.n
    jet_vars = [(g, k) for g in range(n) for k in range(1, max_jet + 1)]
    cands = []
    seen = set()
    coeff_ranges = []
    gens = []
    for name, (lo, hi) in (coeff_gens or {}).items():
        if name in ctx.atom_by_name:
            gens.append(("atom", ctx.atom_by_name[name]))
        else:
            gens.append(("gen", ctx._gen(name)))
        coeff_ranges.append(range(lo, hi + 1))
    # enumerate jet parts: exponents per jet var, total weighted degree - den = 2
    for denp in range(0, den_cap + 1):
        for combo in _jet_combos(jet_vars, denp + 2, max_terms=4):
            deg = sum(k * e for (g, k), e in combo.items())
            if deg - denp != 2:
                continue
            jet_part = ctx.one()
            for (g, k), e in combo.items():
                jet_part = jet_part * ctx.var(ctx.jet(m.coords[g], k)) ** e
            if den_gen is not None:
                dpart = ctx.var(den_gen).invert() ** denp
            elif den_atom is not None:
                dpart = SymExpr(ctx, {(): Fraction(1)},
                                ((den_atom.index, denp),)) if denp else ctx.one()
            else:
                if denp:
                    continue
                dpart = ctx.one()
            base = jet_part * dpart
            for exps in itertools.product(*coeff_ranges):
                coeff = ctx.one()
                for (kind, obj), e in zip(gens, exps):
                    if e == 0:
                        continue
                    if kind == "gen":
                        coeff = coeff * (ctx.var(obj) ** e if e > 0
                                         else ctx.var(obj).invert() ** (-e))
                    else:
                        coeff = coeff * (obj.poly ** e if e > 0 else SymExpr(
                            ctx, {(): Fraction(1)}, ((obj.index, -e),)))
                cand = coeff * base
                key = (frozenset(cand.terms.items()), cand.den)
                if key not in seen and not cand.is_zero():
                    seen.add(key)
                    cands.append(cand)
    return cands


def _jet_combos(jet_vars, max_degree, max_terms=4):
    """All exponent maps on jet variables with weighted degree <= max_degree."""
    out = [dict()]
    for jv in jet_vars:
        g, k = jv
        new = []
        for combo in out:
            cur = sum(kk * e for (gg, kk), e in combo.items())
            emax = (max_degree - cur) // k
            for e in range(0, emax + 1):
                if e and len(combo) + 1 > max_terms:
                    continue
                c2 = dict(combo)
                if e:
                    c2[jv] = e
                new.append(c2)
        out = new
    return [c for c in out if c]


def genus_solve(sys: LoopSystem, candidates, rhs):
    """Solve the linear genus step over the candidate monomials."""
    applied = [sys.lhs_apply(c) for c in candidates]
    rows, rvec = structure_rows(sys.m, applied, rhs, sys.pencil_atom, sys.sqrt_gen)
    sol = linear_solve(rows, rvec)
    if not sol.consistent:
        raise LoopError("genus system inconsistent: ansatz too small")
    result = sys.ctx.zero()
    for c, cand in zip(sol.particular, candidates):
        if c:
            result = result + c * cand
    total = sys.ctx.zero()
    for c, e in zip(sol.particular, applied):
        if c:
            total = total + c * e
    if not (total - rhs).is_zero():
        raise LoopError("genus residual nonzero after solve")
    return result, sol
