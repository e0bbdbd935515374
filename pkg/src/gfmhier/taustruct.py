"""Two-point functions of the hierarchy and the genus-zero free energy.

The table entries are built from the four alternating pairing sums (one per
branch-sign combination); identities verified here: symmetry, the base-row
identity, the gradient product rule, the flow-derivative rule, the
unity-derivative rule, and the generating-function division property.
"""

from __future__ import annotations

from fractions import Fraction

from .hierarchy import Hierarchy, evolve
from .manifold import CheckFailure


class WindowError(Exception):
    """A lookup needed a table level outside the computed window."""


class OmegaTable:
    """Two-point functions on a finite window of the index set.

    Entries with i != 0, p < 0 (either slot) are zero by definition; all
    other out-of-window lookups raise WindowError rather than defaulting.
    """

    def __init__(self, h: Hierarchy, p_min=-3, p_max=3, lazy=True):
        self.h = h
        self.ctx = h.ctx
        self.n = h.n
        self.p_min = p_min
        self.p_max = p_max
        self.entries = {}
        if not lazy:
            self.materialize()

    # -- access ------------------------------------------------------------

    def levels(self, i):
        lo = self.p_min if i == 0 else 0
        return range(lo, self.p_max + 1)

    def get(self, i, p, j, q):
        if (i != 0 and p < 0) or (j != 0 and q < 0):
            return self.ctx.zero()
        key = (i, p, j, q)
        if key in self.entries:
            return self.entries[key]
        lo_i = self.p_min if i == 0 else 0
        lo_j = self.p_min if j == 0 else 0
        if not (lo_i <= p <= self.p_max and lo_j <= q <= self.p_max):
            raise WindowError(f"two-point entry ({i},{p};{j},{q}) outside window "
                              f"[{self.p_min},{self.p_max}]")
        val = self._entry(i, p, j, q)
        self.entries[key] = val
        self.entries[(j, q, i, p)] = self._entry(j, q, i, p)
        return val

    # -- construction --------------------------------------------------------

    def _xi(self, i, p):
        if i != 0 and p < 0:
            return [self.ctx.zero()] * self.n
        try:
            return self.h.xi[(i, p)]
        except KeyError:
            raise WindowError(
                f"vector-field table too shallow: need branch {i} level {p}")

    def _entry(self, i, p, j, q):
        h = self.h
        if (i != 0 and p < 0) or (j != 0 and q < 0):
            return self.ctx.zero()
        if i != 0 and j != 0:
            total = self.ctx.zero()
            for k in range(0, q + 1):
                t = h.pair(self._xi(i, p + k + 1), self._xi(j, q - k))
                total = total + (t if k % 2 == 0 else -t)
            return total
        if i == 0 and j != 0:
            total = self.ctx.zero()
            for k in range(0, q + 1):
                t = h.pair(self._xi(0, p + 1 + k), self._xi(j, q - k))
                total = total + (t if k % 2 == 0 else -t)
            return total
        if i != 0 and j == 0:
            total = self.ctx.zero()
            for k in range(0, p + 1):
                t = h.pair(self._xi(i, p - k), self._xi(0, q + 1 + k))
                total = total + (t if k % 2 == 0 else -t)
            return total
        # both on the unity branch
        total = self.ctx.zero()
        if p >= 0:
            for k in range(0, p):
                t = h.pair(self._xi(0, p - k), self._xi(0, q + 1 + k))
                total = total + (t if k % 2 == 0 else -t)
            theta = self._theta(p + q)
            total = total + (theta if p % 2 == 0 else -theta)
        else:
            for k in range(0, -p):
                t = h.pair(self._xi(0, p + 1 + k), self._xi(0, q - k))
                total = total + (t if k % 2 == 0 else -t)
            theta = self._theta(p + q)
            total = total + (theta if p % 2 == 0 else -theta)
        return total

    def _theta(self, p):
        try:
            return self.h.theta[(0, p)]
        except KeyError:
            raise WindowError(f"density table too shallow: need unity level {p}")

    def materialize(self):
        for i in range(self.n + 1):
            for p in self.levels(i):
                for j in range(self.n + 1):
                    for q in self.levels(j):
                        if (i, p, j, q) not in self.entries:
                            self.entries[(i, p, j, q)] = self._entry(i, p, j, q)

    # -- identity checks -------------------------------------------------------

    def symmetry_check(self):
        self.materialize()
        for (i, p, j, q), val in self.entries.items():
            if not (val - self.entries[(j, q, i, p)]).is_zero():
                raise CheckFailure(f"two-point symmetry fails at ({i},{p};{j},{q})")

    def base_row_check(self):
        self.materialize()
        """Entry against (0,0) reproduces the density itself."""
        for j in range(self.n + 1):
            for q in self.levels(j):
                if (j, q) not in self.h.theta:
                    continue
                if not (self.entries[(0, 0, j, q)] - self.h.theta[(j, q)]).is_zero():
                    raise CheckFailure(f"base-row identity fails at ({j},{q})")

    def gradient_check(self):
        self.materialize()
        """grad of an entry equals the algebra product of the two gradients."""
        c = self.h.m.c_tensor()
        for (i, p, j, q), val in self.entries.items():
            if (j, q, i, p) < (i, p, j, q):
                continue
            x = self._xi(i, p)
            y = self._xi(j, q)
            prod = [sum((c[g][a][b] * x[a] * y[b]
                         for a in range(self.n) for b in range(self.n)), self.ctx.zero())
                    for g in range(self.n)]
            grad = self.h.grad(val)
            for g in range(self.n):
                if not (grad[g] - prod[g]).is_zero():
                    raise CheckFailure(f"gradient rule fails at ({i},{p};{j},{q})")

    def flow_derivative_check(self, pairs):
        """d theta_{i,p} / d t^{j,q} = d_x of the table entry."""
        for (i, p), (j, q) in pairs:
            th = self.h.theta[(i, p)]
            lhs = evolve(self.ctx, self.h.m.coords, th, self.h.flow(j, q))
            rhs = self.get(i, p, j, q).xdiff()
            if not (lhs - rhs).is_zero():
                raise CheckFailure(f"flow-derivative rule fails at ({i},{p};{j},{q})")

    def unity_derivative_check(self):
        self.materialize()
        """d_e of an entry lowers one level in each slot (+ metric delta)."""
        e = self.h.m.unity()
        eta = self.h.m.eta
        for (i, p, j, q), val in self.entries.items():
            if i == 0 and p - 1 < self.p_min:
                continue
            if j == 0 and q - 1 < self.p_min:
                continue
            lhs = sum((e[a] * val.diff(self.h.m.coords[a]) for a in range(self.n)),
                      self.ctx.zero())
            rhs = self.get(i, p - 1, j, q) + self.get(i, p, j, q - 1)
            if i != 0 and j != 0 and p == 0 and q == 0:
                rhs = rhs + eta[i - 1][j - 1]
            if not (lhs - rhs).is_zero():
                raise CheckFailure(f"unity-derivative rule fails at ({i},{p};{j},{q})")

    def x_derivative_symmetry_check(self):
        self.materialize()
        """d_x of an entry is symmetric under slot exchange (consequence)."""
        for (i, p, j, q), val in self.entries.items():
            other = self.entries[(j, q, i, p)]
            if not (val.xdiff() - other.xdiff()).is_zero():
                raise CheckFailure(f"x-derivative symmetry fails at ({i},{p};{j},{q})")


def generating_function_check(h: Hierarchy, order):
    """Pairing series minus the metric is divisible by z+w with the table
    entries as quotient coefficients."""
    ctx = h.ctx
    for a in range(h.n):
        for b in range(h.n):
            s = {}
            for p in range(order + 2):
                for q in range(order + 2 - p):
                    s[(p, q)] = h.pair(h.xi[(a + 1, p)], h.xi[(b + 1, q)])
            s[(0, 0)] = s[(0, 0)] - h.m.eta[a][b]
            # quotient of division by z + w
            quo = {}
            for p in range(order, -1, -1):
                for q in range(order - p + 1):
                    quo[(p, q)] = s[(p + 1, q)] - quo.get((p + 1, q - 1), ctx.zero())
            # verify (z+w)*quo == s on the window and match the table entries
            for p in range(order + 1):
                for q in range(order + 1 - p):
                    recon = quo.get((p - 1, q), ctx.zero()) + quo.get((p, q - 1), ctx.zero())
                    if not (recon - s[(p, q)]).is_zero():
                        raise CheckFailure(
                            f"series not divisible by z+w at ({a},{b}) order ({p},{q})",
                            recon - s[(p, q)])
    return True


def generating_function_against_table(h: Hierarchy, table: OmegaTable, order):
    """Quotient coefficients of the division equal the table entries."""
    ctx = h.ctx
    for a in range(h.n):
        for b in range(h.n):
            s = {}
            for p in range(order + 3):
                for q in range(order + 3 - p):
                    s[(p, q)] = h.pair(h.xi[(a + 1, p)], h.xi[(b + 1, q)])
            s[(0, 0)] = s[(0, 0)] - h.m.eta[a][b]
            quo = {}
            for p in range(order + 1, -1, -1):
                for q in range(order + 2 - p):
                    quo[(p, q)] = s[(p + 1, q)] - quo.get((p + 1, q - 1), ctx.zero())
            for p in range(order + 1):
                for q in range(order + 1 - p):
                    if not (quo[(p, q)] - table.get(a + 1, p, b + 1, q)).is_zero():
                        raise CheckFailure(
                            f"generating quotient differs from table at "
                            f"({a},{p};{b},{q})")
    return True


class Genus0FreeEnergy:
    """Quadratic form representation of the genus-zero free energy.

    Holds 1/2 * shifted-time * shifted-time * entry terms as a symmetric
    map; the time variables stay symbolic labels (solving the critical-point
    equation for v(t) is out of scope).
    """

    def __init__(self, table: OmegaTable, shifts):
        self.table = table
        self.shifts = dict(shifts)
        self.terms = {}
        keys = [(i, p) for i in range(table.n + 1) for p in table.levels(i)]
        for a, (i, p) in enumerate(keys):
            for (j, q) in keys[a:]:
                val = table.get(i, p, j, q)
                if val.is_zero():
                    continue
                w = Fraction(1, 2) if (i, p) == (j, q) else Fraction(1)
                self.terms[((i, p), (j, q))] = (w, val)

    def coefficient(self, ip, jq):
        key = (ip, jq) if (ip, jq) in self.terms else (jq, ip)
        return self.terms.get(key)
