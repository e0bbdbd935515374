"""The associated flat-unity manifold two dimensions up, and the way back.

Given the base data, two extra flat coordinates are appended; the enlarged
potential gains a quadratic-cubic correction making the first new coordinate
direction the flat unity.  The enlarged monodromy data is block-assembled
from the base one together with the realized Euler constants.  Deformed
densities upstairs are finite exponential-type sums of the base densities;
the restriction map substitutes the new coordinates back.
"""

from __future__ import annotations

import math
from fractions import Fraction

from .hierarchy import Hierarchy
from .manifold import CheckFailure, GFManifold


class ExtendedManifold:
    """Flat-unity enlargement of a base manifold with its hierarchy."""

    def __init__(self, h: Hierarchy, extra_prefix="v0", last_name="vL"):
        self.h = h
        self.base = h.m
        ctx = self.base.ctx
        self.ctx = ctx
        n = self.base.n
        self.v0 = ctx.add_coordinate(extra_prefix)
        self.vlast = ctx.add_coordinate(last_name)
        c0 = h.c_realized.get(0, Fraction(0))
        d = self.base.charge
        coords = [self.v0] + list(self.base.coords) + [self.vlast]
        eta = [[Fraction(0)] * (n + 2) for _ in range(n + 2)]
        eta[0][n + 1] = eta[n + 1][0] = Fraction(1)
        for a in range(n):
            for b in range(n):
                eta[a + 1][b + 1] = self.base.eta[a][b]
        vv = sum((ctx.var(self.base.coords[a]) * ctx.var(self.base.coords[b])
                  * self.base.eta[a][b] for a in range(n) for b in range(n)), ctx.zero())
        pot = (ctx.var(self.v0) ** 2 * ctx.var(self.vlast) / 2
               + ctx.var(self.v0) * vv / 2 + self.base.potential)
        euler = ([ctx.var(self.v0)] + list(self.base.euler)
                 + [(1 - d) * ctx.var(self.vlast) + c0])
        mu = [-d / 2] + list(self.base.mu) + [d / 2]
        smax = set(self.base.R) | {s for s, v in h.r_realized.items() if any(v)}
        if c0:
            smax.add(1)
        R = {}
        for s in sorted(smax):
            mat = [[Fraction(0)] * (n + 2) for _ in range(n + 2)]
            base_mat = self.base.R.get(s)
            rvec = h.r_realized.get(s, [Fraction(0)] * n)
            for a in range(n):
                mat[a + 1][0] = rvec[a]
                for b in range(n):
                    if base_mat:
                        mat[a + 1][b + 1] = base_mat[a][b]
            if s == 1 and c0:
                mat[n + 1][0] = c0
            sign = Fraction((-1) ** (s + 1))
            for a in range(n):
                mat[n + 1][a + 1] = sign * sum(
                    rvec[b] * self.base.eta[a][b] for b in range(n))
            R[s] = mat
        self.manifold = GFManifold(
            ctx, coords, eta, pot, euler, mu, R, d,
            name=self.base.name + "+2")
        self.theta_tilde = {}

    # -- deformed densities upstairs --------------------------------------------

    def build_theta(self, level):
        ctx, n = self.ctx, self.base.n
        x = ctx.var(self.v0)
        for p in range(0, level + 1):
            val = ctx.var(self.vlast) * x ** p / math.factorial(p)
            for k in range(0, p):
                val = val + x ** k * self.h.theta[(0, p - k)] / math.factorial(k)
            self.theta_tilde[(0, p)] = val
            self.theta_tilde[(n + 1, p)] = x ** (p + 1) / math.factorial(p + 1)
            for a in range(1, n + 1):
                val = ctx.zero()
                for k in range(0, p + 1):
                    val = val + x ** k * self.h.theta[(a, p - k)] / math.factorial(k)
                self.theta_tilde[(a, p)] = val
        return self.theta_tilde

    def theta_checks(self, level):
        """Base row, lowering along the flat unity, and the gradient recursion."""
        mt = self.manifold
        n2 = mt.n
        for i in range(n2):
            want = sum((mt.eta[i][j] * self.ctx.var(mt.coords[j]) for j in range(n2)),
                       self.ctx.zero())
            if not (self.theta_tilde[(i, 0)] - want).is_zero():
                raise CheckFailure(f"extended density base row fails at {i}")
        for p in range(0, level):
            for i in range(n2):
                lhs = self.theta_tilde[(i, p + 1)].diff(self.v0)
                if not (lhs - self.theta_tilde[(i, p)]).is_zero():
                    raise CheckFailure(f"unity-lowering fails at ({i},{p + 1})")
        c = mt.c_tensor()
        for p in range(0, level):
            for ell in range(n2):
                for i in range(n2):
                    for j in range(i, n2):
                        lhs = (self.theta_tilde[(ell, p + 1)]
                               .diff(mt.coords[i]).diff(mt.coords[j]))
                        rhs = sum((c[k][i][j] * self.theta_tilde[(ell, p)].diff(mt.coords[k])
                                   for k in range(n2)), self.ctx.zero())
                        if not (lhs - rhs).is_zero():
                            raise CheckFailure(
                                f"deformed-coordinate recursion fails at "
                                f"({ell},{p + 1};{i},{j})")

    def grading_check(self, level):
        """Euler grading of the extended densities with the block monodromy."""
        mt = self.manifold
        n2 = mt.n
        grads = {}
        for (i, p), th in self.theta_tilde.items():
            grads[(i, p)] = [sum((self.ctx.const(mt.eta_inv[a][b]) * th.diff(mt.coords[b])
                                  for b in range(n2)), self.ctx.zero()) for a in range(n2)]
        for p in range(0, level + 1):
            for i in range(n2):
                for g in range(n2):
                    val = mt.euler_applied(grads[(i, p)][g])
                    val = val - (p + mt.mu[i] - mt.mu[g]) * grads[(i, p)][g]
                    for s, mat in mt.R.items():
                        if s <= p:
                            for j in range(n2):
                                if mat[j][i]:
                                    val = val - mat[j][i] * grads[(j, p - s)][g]
                    if not val.is_zero():
                        raise CheckFailure(f"extended grading fails at ({i},{p}) comp {g}")

    # -- restriction -------------------------------------------------------------

    def restrict(self, expr):
        """Pull a function upstairs back to the base manifold."""
        return expr.subs({self.v0: self.ctx.zero(), self.vlast: self.h.theta[(0, 0)]})

    def restriction_checks(self, level):
        n = self.base.n
        for p in range(0, level + 1):
            if not self.restrict(self.theta_tilde[(n + 1, p)]).is_zero():
                raise CheckFailure(f"last-branch restriction nonzero at level {p}")
            for i in range(0, n + 1):
                want = self.h.theta[(i, p)]
                got = self.restrict(self.theta_tilde[(i, p)])
                if not (got - want).is_zero():
                    raise CheckFailure(f"density restriction fails at ({i},{p})")
        # first-coordinate derivative restricts to a level shift
        for p in range(1, level + 1):
            for i in range(0, n + 1):
                got = self.restrict(self.theta_tilde[(i, p)].diff(self.v0))
                if not (got - self.h.theta[(i, p - 1)]).is_zero():
                    raise CheckFailure(f"shift restriction fails at ({i},{p})")
            got = self.restrict(self.theta_tilde[(n + 1, p)].diff(self.v0))
            if not got.is_zero():
                raise CheckFailure(f"last-branch shift restriction fails at {p}")
        got0 = self.restrict(self.theta_tilde[(n + 1, 0)].diff(self.v0))
        if not (got0 - 1).is_zero():
            raise CheckFailure("last-branch base shift restriction is not the unit")
        # coordinate derivatives of the unity-branch densities lose one unity covector
        e_low = self.base.unity_lower()
        for a in range(n):
            got = self.restrict(self.theta_tilde[(0, 0)].diff(self.base.coords[a]))
            want = self.h.theta[(0, 0)].diff(self.base.coords[a]) - e_low[a]
            if not (got - want).is_zero():
                raise CheckFailure(f"unity-branch base derivative restriction fails at {a}")

    def embedding_check(self):
        """The graph embedding preserves multiplication and metric."""
        mt = self.manifold
        n = self.base.n
        e_low = self.base.unity_lower()
        c_t = mt.c_tensor()
        c_b = self.base.c_tensor()
        # pushforward of d_a is d_{a+1} + e_a d_{last}
        for a in range(n):
            for b in range(n):
                # metric
                val = mt.eta[a + 1][b + 1]
                if Fraction(val) != self.base.eta[a][b]:
                    raise CheckFailure("embedding does not preserve the metric")
                # multiplication: compare components of X_a . X_b with c^g_{ab} X_g
                prod = [self.ctx.zero()] * (n + 2)
                for i, wi in [(a + 1, self.ctx.one()), (n + 1, e_low[a])]:
                    for j, wj in [(b + 1, self.ctx.one()), (n + 1, e_low[b])]:
                        for k in range(n + 2):
                            prod[k] = prod[k] + wi * wj * self.restrict(c_t[k][i][j])
                want = [self.ctx.zero()] * (n + 2)
                for g in range(n):
                    want[g + 1] = want[g + 1] + c_b[g][a][b]
                    want[n + 1] = want[n + 1] + c_b[g][a][b] * e_low[g]
                for k in range(n + 2):
                    if not (prod[k] - want[k]).is_zero():
                        raise CheckFailure(
                            f"embedding does not preserve multiplication at "
                            f"({a},{b}) component {k}")
