"""Recursive construction of the commuting-flow densities and vector fields.

Index set: branch i = 0 carries levels p in Z (window-bounded); branches
i = 1..n carry levels p >= 0.  The tables are built level by level:

* the raw level is obtained by integrating the gradient recursion,
* the grading condition plus the pairing normalization fix the free
  integration constants (remaining resonant constants come from fixture
  overrides, else zero),
* densities are produced from the alternating pairing sums (positive
  branches) and antiderivatives with constant fixing (unity branch).

Also provides the dispersionless flows, the pair of compatible Hamiltonian
operators, recursion and symmetry checks, and evolutionary calculus helpers.
"""

from __future__ import annotations

from fractions import Fraction

from .manifold import CheckFailure, GFManifold, integrate_gradient
from .symcore import IntegrationError, SymExpr, jet_directions, linear_solve


class GaugeError(Exception):
    pass


class Hierarchy:
    """Vector-field and density tables over a finite index window."""

    def __init__(self, m: GFManifold, xi_max=8, xi_min=-5):
        self.m = m
        self.ctx = m.ctx
        self.n = m.n
        self.xi_max = xi_max
        self.xi_min = xi_min
        self.xi = {}      # (i, p) -> list of upper components
        self.theta = {}   # (i, p) -> SymExpr
        self.r_realized = {1: list(m.r_consts)}
        self.c_realized = {}
        self._flows = {}
        self._build()

    # -- index helpers -------------------------------------------------------

    def branches(self):
        return range(self.n + 1)  # 0 = unity branch, 1..n coordinate branches

    def levels(self, i):
        if i == 0:
            return range(self.xi_min, self.xi_max + 1)
        return range(0, self.xi_max + 1)

    def pair(self, x, y):
        """eta-pairing of two upper-component vectors."""
        out = self.ctx.zero()
        for a in range(self.n):
            for b in range(self.n):
                if self.m.eta[a][b]:
                    out = out + self.m.eta[a][b] * x[a] * y[b]
        return out

    def grad(self, expr):
        """eta-gradient (upper components) of a function of the coordinates."""
        return [sum((self.ctx.const(self.m.eta_inv[a][b]) * expr.diff(self.m.coords[b])
                     for b in range(self.n)), self.ctx.zero()) for a in range(self.n)]

    # -- construction ----------------------------------------------------------

    def _build(self):
        ctx, m, n = self.ctx, self.m, self.n
        e = m.unity()
        for a in range(n):
            self.xi[(a + 1, 0)] = [ctx.one() if g == a else ctx.zero() for g in range(n)]
        self.xi[(0, 0)] = list(e)
        self.xi[(0, 1)] = [ctx.var(c) for c in m.coords]
        for p in range(1, self.xi_max + 1):
            self._level_up(p)
        for p in range(1, -self.xi_min + 1):
            self._level_down(p)
        self._densities()

    def _raw_integrate(self, source):
        """Solve d_a xi^g = c^g_{a s} source^s for each component g."""
        c = self.m.c_tensor()
        n, m = self.n, self.m
        out = []
        for g in range(n):
            comps = [sum((c[g][a][s] * source[s] for s in range(n)), self.ctx.zero())
                     for a in range(n)]
            # gradient components with the lower index: d_a xi^g = comps[a]
            out.append(integrate_gradient(self.ctx, comps, m.coords))
        return out

    def _level_up(self, p):
        """Build level p of every branch from level p-1, fixing the gauge."""
        ctx, m, n = self.ctx, self.m, self.n
        raw = {}
        branch_list = list(range(1, n + 1)) + ([0] if p >= 2 else [])
        for i in branch_list:
            raw[i] = self._raw_integrate(self.xi[(i, p - 1)])
        # unknown constants a^g_i per built branch
        unknowns = [(i, g) for i in branch_list for g in range(n)]
        idx = {u: k for k, u in enumerate(unknowns)}
        rows, rhs = [], []

        def add_equation(coeffs, const):
            rows.append(coeffs)
            rhs.append(const)

        for i in branch_list:
            mu_i = -m.charge / 2 if i == 0 else m.mu[i - 1]
            for g in range(n):
                coef = p + mu_i - m.mu[g]
                res = m.euler_applied(raw[i][g]) - coef * raw[i][g]
                if i == 0:
                    for s in range(1, p):
                        rvec = self.r_realized.get(s)
                        if rvec:
                            for eps in range(n):
                                if rvec[eps]:
                                    res = res - rvec[eps] * self.xi[(eps + 1, p - s)][g]
                else:
                    for s, mat in m.R.items():
                        if s <= p:
                            for eps in range(n):
                                if mat[eps][i - 1]:
                                    res = res - mat[eps][i - 1] * self.xi[(eps + 1, p - s)][g]
                if not res.is_const():
                    raise GaugeError(
                        f"grading residual not constant at branch {i}, level {p}: {res}")
                resc = res.const_value()
                if i == 0:
                    # resonant slot feeds the new Euler constant r^g_p instead
                    if coef == 0:
                        self.r_realized.setdefault(p, [Fraction(0)] * n)[g] = resc
                        continue
                    if m.mu[g] + m.charge / 2 == p:
                        # would be a legal r-slot but coefficient nonzero: impossible
                        raise GaugeError("inconsistent grading slot")
                row = [Fraction(0)] * len(unknowns)
                row[idx[(i, g)]] = coef
                add_equation(row, resc)
        if p not in self.r_realized and 0 in branch_list:
            self.r_realized[p] = [Fraction(0)] * n
        # pairing normalization at total level p (coordinate branches only)
        for a in range(n):
            for b in range(n):
                total = ctx.zero()
                for k in range(0, p + 1):
                    x = raw[a + 1] if k == p else self.xi[(a + 1, k)]
                    y = raw[b + 1] if k == 0 else self.xi[(b + 1, p - k)]
                    term = self.pair(x, y)
                    total = total + (term if k % 2 == 0 else -term)
                if not total.is_const():
                    raise GaugeError(f"pairing residual not constant at level {p}")
                row = [Fraction(0)] * len(unknowns)
                for g in range(n):
                    # k = p term contributes (-1)^p <a_a, xi_{b,0}> etc.
                    row[idx[(b + 1, g)]] += m.eta[a][g]
                    row[idx[(a + 1, g)]] += Fraction((-1) ** p) * m.eta[b][g]
                add_equation(row, -total.const_value())
        sol = linear_solve(rows, rhs)
        if not sol.consistent:
            raise GaugeError(f"gauge system inconsistent at level {p}")
        values = list(sol.particular)
        overrides = (self.m.gauge_overrides or {}).get("xi_free", {})
        for free_col, vec in zip(sol.free_columns, sol.nullspace):
            i, g = unknowns[free_col]
            want = overrides.get(f"{i},{p}", {}).get(str(g + 1))
            if want is not None:
                w = Fraction(want)
                values = [x + w * y for x, y in zip(values, vec)]
        for i in branch_list:
            self.xi[(i, p)] = [raw[i][g] + ctx.const(values[idx[(i, g)]]) for g in range(n)]

    def _level_down(self, p):
        """Unity-branch level -p by directional derivative along the unity."""
        e = self.m.unity()
        prev = self.xi[(0, -p + 1)]
        cur = [sum((e[a] * comp.diff(self.m.coords[a]) for a in range(self.n)),
                   self.ctx.zero()) for comp in prev]
        self.xi[(0, -p)] = cur
        # check the gradient recursion and the grading on the way down
        c = self.m.c_tensor()
        for g in range(self.n):
            down = [sum((c[g][a][s] * cur[s] for s in range(self.n)), self.ctx.zero())
                    for a in range(self.n)]
            for a in range(self.n):
                if not (prev[g].diff(self.m.coords[a]) - down[a]).is_zero():
                    # recursion relates level -p+1's gradient to level -p
                    raise CheckFailure(f"downward recursion fails at level {-p}")
        for g in range(self.n):
            coef = -p - self.m.charge / 2 - self.m.mu[g]
            res = self.m.euler_applied(cur[g]) - coef * cur[g]
            if not res.is_zero():
                raise CheckFailure(f"downward grading fails at level {-p}", res)

    def _densities(self):
        ctx, m, n = self.ctx, self.m, self.n
        # coordinate branches: alternating pairing sums
        for a in range(n):
            for p in range(0, self.xi_max):
                total = ctx.zero()
                for k in range(0, p + 1):
                    term = self.pair(self.xi[(0, k + 1)], self.xi[(a + 1, p - k)])
                    total = total + (term if k % 2 == 0 else -term)
                self.theta[(a + 1, p)] = total
        # unity branch: antiderivative + constant fixing
        for p in range(self.xi_min, self.xi_max):
            if p == 0:
                self.theta[(0, 0)] = m.phi_potential()
                continue
            lower = [sum((self.ctx.const(m.eta[g][b]) * self.xi[(0, p)][b]
                          for b in range(n)), ctx.zero()) for g in range(n)]
            base = integrate_gradient(ctx, lower, m.coords)
            coef = p - m.charge + 1
            res = m.euler_applied(base) - coef * base
            for s in range(1, p + 1):
                rvec = self.r_realized.get(s)
                if rvec and p - s >= 0:
                    for eps in range(n):
                        if rvec[eps]:
                            res = res - rvec[eps] * self.theta[(eps + 1, p - s)]
            if not res.is_const():
                raise GaugeError(f"density grading residual not constant at level {p}")
            resc = res.const_value()
            if coef != 0:
                self.theta[(0, p)] = base + ctx.const(resc / coef)
            else:
                self.theta[(0, p)] = base
                self.c_realized[p] = resc
        # record c_0-type constants (resonant even levels)
        for p in range(self.xi_min, self.xi_max):
            if p - m.charge + 1 == 0 and p not in self.c_realized:
                res = m.euler_applied(self.theta[(0, p)]) - 0
                for s in range(1, p + 1):
                    rvec = self.r_realized.get(s)
                    if rvec and p - s >= 0:
                        for eps in range(n):
                            if rvec[eps]:
                                res = res - rvec[eps] * self.theta[(eps + 1, p - s)]
                self.c_realized[p] = res.const_value()

    # -- verification ----------------------------------------------------------

    def gradient_check(self):
        """grad theta_{i,p} = xi_{i,p} everywhere both are tabulated."""
        for (i, p), th in self.theta.items():
            g = self.grad(th)
            for a in range(self.n):
                if not (g[a] - self.xi[(i, p)][a]).is_zero():
                    raise CheckFailure(f"grad theta != xi at ({i},{p}) comp {a}")

    def theta_grading_check(self, i, p):
        """Read off the level p+1 Euler constant from the density grading."""
        m, n = self.m, self.n
        if i == 0:
            raise ValueError("use the unity-branch construction records")
        a = i - 1
        val = m.euler_applied(self.theta[(i, p)])
        val = val - (p + 1 - m.charge / 2 + m.mu[a]) * self.theta[(i, p)]
        for s, mat in m.R.items():
            if s <= p:
                for eps in range(n):
                    if mat[eps][a]:
                        val = val - self.theta[(eps + 1, p - s)] * mat[eps][a]
        if not val.is_const():
            raise CheckFailure(f"density grading fails at ({i},{p})")
        c = val.const_value() * Fraction((-1) ** p)
        # c = r^eps_{p+1} eta_{eps a}
        out = [sum(self.m.eta_inv[e_][b] * (c if b == a else 0) for b in range(n))
               for e_ in range(n)]
        return out

    def orthogonality_check(self, max_level=None):
        """<xi_a(-z), xi_b(z)> = eta_{ab} order by order."""
        top = self.xi_max if max_level is None else max_level
        for p in range(0, top + 1):
            for a in range(self.n):
                for b in range(self.n):
                    total = self.ctx.zero()
                    for k in range(0, p + 1):
                        term = self.pair(self.xi[(a + 1, k)], self.xi[(b + 1, p - k)])
                        total = total + (term if k % 2 == 0 else -term)
                    want = self.m.eta[a][b] if p == 0 else 0
                    if not (total - want).is_zero():
                        raise CheckFailure(f"pairing normalization fails at ({a},{b},{p})")

    def unity_derivative_check(self):
        """d_e xi_{i,p} = xi_{i,p-1} on the window."""
        e = self.m.unity()
        for (i, p), comps in self.xi.items():
            if (i, p - 1) not in self.xi:
                continue
            for g in range(self.n):
                lhs = sum((e[a] * comps[g].diff(self.m.coords[a]) for a in range(self.n)),
                          self.ctx.zero())
                want = self.xi[(i, p - 1)][g] if (i == 0 or p - 1 >= 0) else self.ctx.zero()
                if not (lhs - want).is_zero():
                    raise CheckFailure(f"d_e xi fails at ({i},{p}) comp {g}")

    # -- flows -----------------------------------------------------------------

    def flow(self, i, p):
        """Right-hand side of dv^a/dt^{i,p} (list over a)."""
        key = (i, p)
        if key not in self._flows:
            th = self.theta[(i, p + 1)]
            out = []
            for a in range(self.n):
                val = sum((self.ctx.const(self.m.eta_inv[a][g]) * th.diff(self.m.coords[g])
                           for g in range(self.n)), self.ctx.zero())
                out.append(val.xdiff())
            self._flows[key] = out
        return self._flows[key]

    def flow_indices(self):
        for i in self.branches():
            for p in self.levels(i):
                if (i, p + 1) in self.theta:
                    yield (i, p)

    def hamiltonian_operators(self):
        """(P1, P2) as callables on covector arguments (delta H lists)."""
        g, gamma = self.m.intersection_form()

        def p1(covec):
            return [sum((self.ctx.const(self.m.eta_inv[a][b]) * covec[b]
                         for b in range(self.n)), self.ctx.zero()).xdiff()
                    for a in range(self.n)]

        def p2(covec):
            out = []
            for a in range(self.n):
                val = sum((g.data[a][b] * covec[b].xdiff() for b in range(self.n)),
                          self.ctx.zero())
                for b in range(self.n):
                    for x in range(self.n):
                        val = val + gamma[a][b][x] * self.ctx.var(
                            self.ctx.jet(self.m.coords[x], 1)) * covec[b]
                out.append(val)
            return out

        return p1, p2

    def biham_recursion_check(self, q_range=None):
        """Second-structure recursion between consecutive Hamiltonians."""
        m, n = self.m, self.n
        p1, p2 = self.hamiltonian_operators()
        pairs = []
        for b in range(1, n + 1):
            for q in (q_range or range(1, self.xi_max - 1)):
                pairs.append((b, q))
        for q in (q_range or range(self.xi_min + 1, self.xi_max - 1)):
            pairs.append((0, q))
        for (j, q) in pairs:
            if (j, q + 1) not in self.theta or (j, q) not in self.theta:
                continue
            dh_prev = [self.theta[(j, q)].diff(c) for c in m.coords]
            dh_cur = [self.theta[(j, q + 1)].diff(c) for c in m.coords]
            lhs = p2(dh_prev)
            if j == 0:
                coef = q + Fraction(1, 2) - m.charge / 2
            else:
                coef = q + Fraction(1, 2) + m.mu[j - 1]
            rhs = [coef * x for x in p1(dh_cur)]
            smax = max([0] + list(m.R)) if j else max([0] + list(self.r_realized))
            for s in range(1, smax + 1):
                if j == 0:
                    rvec = self.r_realized.get(s)
                    if rvec:
                        for eps in range(n):
                            if rvec[eps] and (eps + 1, q - s + 1) in self.theta:
                                extra = p1([self.theta[(eps + 1, q - s + 1)].diff(c)
                                            for c in m.coords])
                                rhs = [x + rvec[eps] * y for x, y in zip(rhs, extra)]
                else:
                    mat = m.R.get(s)
                    if mat:
                        for eps in range(n):
                            if mat[eps][j - 1] and (eps + 1, q - s + 1) in self.theta:
                                extra = p1([self.theta[(eps + 1, q - s + 1)].diff(c)
                                            for c in m.coords])
                                rhs = [x + mat[eps][j - 1] * y for x, y in zip(rhs, extra)]
            for a in range(n):
                if not (lhs[a] - rhs[a]).is_zero():
                    raise CheckFailure(f"recursion fails at ({j},{q}) component {a}")

    def commutativity_check(self, pairs):
        """Flows pairwise commute as evolutionary vector fields."""
        for (i, p), (j, q) in pairs:
            f = self.flow(i, p)
            g = self.flow(j, q)
            for a in range(self.n):
                lhs = evolve(self.ctx, self.m.coords, g[a], f)
                rhs = evolve(self.ctx, self.m.coords, f[a], g)
                if not (lhs - rhs).is_zero():
                    raise CheckFailure(f"flows ({i},{p}) and ({j},{q}) do not commute")


def evolve(ctx, coords, expr, flow):
    """Evolutionary derivative of a jet expression along a flow vector."""
    dx_cache = {}

    def flow_jet(a, k):
        if (a, k) not in dx_cache:
            dx_cache[(a, k)] = flow[a] if k == 0 else flow_jet(a, k - 1).xdiff()
        return dx_cache[(a, k)]

    coord_index = {c.name: a for a, c in enumerate(coords)}
    out = ctx.zero()
    for gen in jet_directions(ctx, expr):
        base = gen.coord or gen.name
        if base not in coord_index:
            continue
        d = expr.diff(gen)
        if not d.is_zero():
            out = out + d * flow_jet(coord_index[base], gen.jet_order)
    return out
