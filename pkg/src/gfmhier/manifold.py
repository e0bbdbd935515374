"""Data model for a Frobenius-type manifold with non-flat unity.

A ``GFManifold`` bundles the defining data (flat metric, potential, Euler
field, grading and nilpotent monodromy constants, charge) over a symbolic
``Context`` and derives the structure tensors: multiplication constants,
unity field, intersection form and its connection, and the multiplication
operators used everywhere downstream.  Axioms are verified symbolically.

Manifold spec files are plain JSON; see ``load_manifold``.
"""

from __future__ import annotations

import json
from fractions import Fraction
from typing import Optional

from .symcore import (
    Context, ContextError, DivisionError_, ExprMatrix, IntegrationError, SymExpr,
)


class ManifoldError(Exception):
    pass


class CheckFailure(Exception):
    """An axiom check failed; carries a witness expression."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


def _fr(x):
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x)


class GFManifold:
    """Defining data plus derived tensors, all exact."""

    def __init__(self, ctx: Context, coords, eta, potential, euler, mu, R,
                 charge, c_consts=None, name="manifold", gauge_overrides=None,
                 period_data=None, meta=None):
        self.ctx = ctx
        self.coords = [ctx._gen(c) for c in coords]
        self.n = len(self.coords)
        self.eta = [[_fr(x) for x in row] for row in eta]
        self.potential = ctx.expr(potential)
        self.euler = [ctx.expr(E) for E in euler]
        self.mu = [_fr(m) for m in mu]
        self.R = {int(s): [[_fr(x) for x in row] for row in mat] for s, mat in (R or {}).items()}
        self.charge = _fr(charge)
        self.c_consts = {int(p): _fr(c) for p, c in (c_consts or {}).items()}
        self.name = name
        self.gauge_overrides = dict(gauge_overrides or {})
        self.period_data = period_data
        self.meta = dict(meta or {})
        self._cache = {}

        n = self.n
        if len(self.eta) != n or any(len(r) != n for r in self.eta):
            raise ManifoldError("eta has wrong shape")
        det = _rat_det(self.eta)
        if det == 0:
            raise ManifoldError("eta is degenerate")
        for i in range(n):
            for j in range(n):
                if self.eta[i][j] != self.eta[j][i]:
                    raise ManifoldError("eta is not symmetric")
        self.eta_inv = _rat_inv(self.eta)
        self._validate_monodromy()
        self.r_consts = self._extract_euler_constants()

    # -- constraints at construction ---------------------------------------

    def _validate_monodromy(self):
        n = self.n
        for a in range(n):
            for b in range(n):
                if self.eta[a][b] and self.mu[a] + self.mu[b] != 0:
                    raise ManifoldError("mu*eta + eta*mu != 0")
        for s, mat in self.R.items():
            if s < 1:
                raise ManifoldError("R_s defined only for s >= 1")
            for a in range(n):
                for b in range(n):
                    if mat[a][b] and self.mu[a] - self.mu[b] != s:
                        raise ManifoldError(f"(R_{s})^{a}_{b} violates the grading")
            sign = Fraction((-1) ** (s + 1))
            for a in range(n):
                for b in range(n):
                    lhs = sum(mat[c][a] * self.eta[c][b] for c in range(n))
                    rhs = sign * sum(self.eta[a][c] * mat[c][b] for c in range(n))
                    if lhs != rhs:
                        raise ManifoldError(f"R_{s}^T eta != (-1)^(s+1) eta R_{s}")
        for p, c in self.c_consts.items():
            if c == 0 or p == 0:
                continue
            if not (p == self.charge - 1 and self.charge < 0
                    and self.charge.denominator == 1 and int(self.charge) % 2 == 1):
                raise ManifoldError(f"c_{p} may be nonzero only for negative odd charge")

    def _extract_euler_constants(self):
        """E^a = (1 - d/2 - mu_a) v^a + r^a; returns r and validates the shape."""
        out = []
        for a, comp in enumerate(self.euler):
            expect = (1 - self.charge / 2 - self.mu[a])
            lin = self.ctx.const(expect) * self.ctx.var(self.coords[a])
            diffc = comp - lin
            if not diffc.is_const():
                raise ManifoldError(f"Euler component {a} is not linear + constant")
            r = diffc.const_value()
            if r != 0 and self.mu[a] != 1 - self.charge / 2:
                raise ManifoldError(f"constant part of E^{a} not allowed by the grading")
            out.append(r)
        return out

    # -- derived tensors -----------------------------------------------------

    def c_lower(self, a, b, c):
        """third partial of the potential: c_{abc}."""
        key = ("c_lower", a, b, c)
        if key not in self._cache:
            val = (self.potential.diff(self.coords[a])
                   .diff(self.coords[b]).diff(self.coords[c]))
            self._cache[key] = val
        return self._cache[key]

    def c_tensor(self):
        """Structure constants c^g_{ab} = eta^{gx} d3F/dx da db."""
        if "c" not in self._cache:
            n = self.n
            c = [[[self.ctx.zero() for _ in range(n)] for _ in range(n)] for _ in range(n)]
            for a in range(n):
                for b in range(a, n):
                    thirds = [self.c_lower(a, b, x) for x in range(n)]
                    for g in range(n):
                        val = sum((self.ctx.const(self.eta_inv[g][x]) * thirds[x]
                                   for x in range(n)), self.ctx.zero())
                        c[g][a][b] = val
                        c[g][b][a] = val
            self._cache["c"] = c
        return self._cache["c"]

    def wdvv_check(self):
        """Associativity: returns None or raises CheckFailure with a witness."""
        c = self.c_tensor()
        n = self.n
        for a in range(n):
            for b in range(n):
                for g in range(n):
                    for d in range(n):
                        lhs = sum((c[x][a][b] * c[d][x][g] for x in range(n)), self.ctx.zero())
                        rhs = sum((c[x][g][b] * c[d][x][a] for x in range(n)), self.ctx.zero())
                        if not (lhs - rhs).is_zero():
                            raise CheckFailure(
                                f"associativity fails at ({a},{b},{g},{d})", lhs - rhs)

    def unity(self):
        """Components of the unity field e, from e . X = X."""
        if "e" not in self._cache:
            c = self.c_tensor()
            n = self.n
            last_err = None
            for x in range(n):
                cm = ExprMatrix(self.ctx, [[c[b][g][x] for g in range(n)] for b in range(n)])
                try:
                    inv = cm.inverse()
                except DivisionError_ as err:
                    last_err = err
                    continue
                e = [sum((inv.data[g][b] * (1 if b == x else 0) for b in range(n)),
                         self.ctx.zero()) for g in range(n)]
                ok = True
                for xi in range(n):
                    for b in range(n):
                        lhs = sum((e[g] * c[b][g][xi] for g in range(n)), self.ctx.zero())
                        if not (lhs - (1 if b == xi else 0)).is_zero():
                            ok = False
                if ok:
                    self._cache["e"] = e
                    break
            else:
                raise ManifoldError(f"multiplication degenerate; no unity found: {last_err}")
        return self._cache["e"]

    def unity_lower(self):
        e = self.unity()
        return [sum((self.ctx.const(self.eta[a][b]) * e[b] for b in range(self.n)),
                    self.ctx.zero()) for a in range(self.n)]

    def unity_euler_identities(self):
        """[E,e] = -e, grad<E,e> = (1-d) e, and the closedness of e-lowered."""
        e = self.unity()
        n = self.n
        lie = []
        for g in range(n):
            val = self.ctx.zero()
            for a in range(n):
                val = val + self.euler[a] * e[g].diff(self.coords[a])
                val = val - e[a] * self.euler[g].diff(self.coords[a])
            lie.append(val)
        for g in range(n):
            if not (lie[g] + e[g]).is_zero():
                raise CheckFailure(f"[E,e] != -e in component {g}", lie[g] + e[g])
        pairing = sum((self.euler[a] * e[b] * self.eta[a][b]
                       for a in range(n) for b in range(n)), self.ctx.zero())
        for g in range(n):
            grad = sum((self.ctx.const(self.eta_inv[g][b]) * pairing.diff(self.coords[b])
                        for b in range(n)), self.ctx.zero())
            if not (grad - (1 - self.charge) * e[g]).is_zero():
                raise CheckFailure(f"grad<E,e> != (1-d)e in component {g}")
        for a in range(n):
            for b in range(n):
                da = sum((self.ctx.const(self.eta_inv[a][x]) * e[b].diff(self.coords[x])
                          for x in range(n)), self.ctx.zero())
                db = sum((self.ctx.const(self.eta_inv[b][x]) * e[a].diff(self.coords[x])
                          for x in range(n)), self.ctx.zero())
                if not (da - db).is_zero():
                    raise CheckFailure(f"d^a e^b not symmetric at ({a},{b})")

    def phi_potential(self):
        """theta-base potential: grad phi = e (and g-grad phi = E)."""
        if "phi" not in self._cache:
            if self.charge != 1:
                e = self.unity()
                pairing = sum((self.euler[a] * e[b] * self.eta[a][b]
                               for a in range(self.n) for b in range(self.n)), self.ctx.zero())
                phi = pairing / (1 - self.charge)
            else:
                phi = integrate_gradient(self.ctx, self.unity_lower(), self.coords)
            for a in range(self.n):
                if not (phi.diff(self.coords[a]) - self.unity_lower()[a]).is_zero():
                    raise CheckFailure("phi gradient mismatch", phi)
            g = self.intersection_form()[0]
            for a in range(self.n):
                lhs = sum((g.data[a][b] * phi.diff(self.coords[b]) for b in range(self.n)),
                          self.ctx.zero())
                if not (lhs - self.euler[a]).is_zero():
                    raise CheckFailure("g-gradient of phi is not the Euler field")
            self._cache["phi"] = phi
        return self._cache["phi"]

    def intersection_form(self):
        """(g, Gamma): g^{ab} = E^x c_x^{ab}, Gamma^{ab}_g = (1/2 - mu_b) c^{ab}_g."""
        if "g" not in self._cache:
            n = self.n
            c = self.c_tensor()
            cup = [[[sum((self.ctx.const(self.eta_inv[a][x]) * c[b][x][g] for x in range(n)),
                         self.ctx.zero()) for g in range(n)] for b in range(n)] for a in range(n)]
            g = ExprMatrix(self.ctx, [[
                sum((self.euler[x] * cup[a][b][x] for x in range(n)), self.ctx.zero())
                for b in range(n)] for a in range(n)])
            gamma = [[[self.ctx.const(Fraction(1, 2) - self.mu[b]) * cup[a][b][x]
                       for x in range(n)] for b in range(n)] for a in range(n)]
            self._cache["g"] = (g, gamma)
        return self._cache["g"]

    def u_operator(self):
        """Multiplication by the Euler field: U^a_b = E^g c^a_{gb}."""
        if "U" not in self._cache:
            c = self.c_tensor()
            n = self.n
            self._cache["U"] = ExprMatrix(self.ctx, [[
                sum((self.euler[g] * c[a][g][b] for g in range(n)), self.ctx.zero())
                for b in range(n)] for a in range(n)])
        return self._cache["U"]

    def c_operator(self, g):
        """Multiplication by the coordinate field number g."""
        c = self.c_tensor()
        n = self.n
        return ExprMatrix(self.ctx, [[c[a][g][b] for b in range(n)] for a in range(n)])

    def u_operator_derivative_check(self):
        """dU/dv^g = C_g + C_g mu - mu C_g for every g."""
        u = self.u_operator()
        n = self.n
        for g in range(n):
            cg = self.c_operator(g)
            for a in range(n):
                for b in range(n):
                    lhs = u.data[a][b].diff(self.coords[g])
                    rhs = cg.data[a][b] * (1 + self.mu[b] - self.mu[a])
                    if not (lhs - rhs).is_zero():
                        raise CheckFailure(f"dU rule fails at g={g},({a},{b})")

    def euler_applied(self, expr):
        """Directional derivative along the Euler field."""
        return sum((self.euler[a] * expr.diff(self.coords[a]) for a in range(self.n)),
                   self.ctx.zero())

    def quasihomogeneity_check(self):
        """d_E F - (3-d) F must be quadratic in the flat coordinates."""
        f = self.euler_applied(self.potential) - (3 - self.charge) * self.potential
        for a in range(self.n):
            for b in range(self.n):
                for g in range(self.n):
                    third = f.diff(self.coords[a]).diff(self.coords[b]).diff(self.coords[g])
                    if not third.is_zero():
                        raise CheckFailure("d_E F - (3-d)F is not quadratic", third)

    def validate(self):
        """Run the full axiom suite; raises CheckFailure on the first failure."""
        self.wdvv_check()
        self.unity()
        self.unity_euler_identities()
        self.quasihomogeneity_check()
        self.u_operator_derivative_check()
        self.phi_potential()


def integrate_gradient(ctx, components, coords):
    """Find phi with d phi/d coord_a = components[a]; try coordinate orders."""
    import itertools
    last = None
    for order in itertools.permutations(range(len(coords))):
        try:
            phi = ctx.zero()
            rem = list(components)
            for a in order:
                part = (rem[a]).integrate(coords[a])
                phi = phi + part
                rem = [rem[b] - part.diff(coords[b]) for b in range(len(coords))]
            if all(r.is_zero() for r in rem):
                return phi
            last = IntegrationError("gradient residual nonzero")
        except IntegrationError as err:
            last = err
    raise IntegrationError(f"antiderivative outside generator closure: {last}")


# -- manifold spec files -----------------------------------------------------


def build_context(spec: dict) -> Context:
    """Create the Context a manifold spec file describes."""
    ctx = Context()
    inv = set(spec.get("invertible", []))
    for name in spec["coordinates"]:
        ctx.add_coordinate(name, invertible=name in inv)
    for jet in spec.get("jets", []):
        name = jet["name"]
        base, _, order = name.rpartition("_")
        if base not in ctx.by_name:
            raise ManifoldError(f"jet {name!r} of unknown coordinate {base!r}")
        k = int(order)
        disp = f"{base}_x" if k == 1 else (f"{base}_xx" if k == 2 else f"{base}^({k})")
        ctx.add_generator(name, "jet", invertible=jet.get("invertible", False),
                          coord=base, jet_order=k, display=disp)
    for gen in spec.get("generators", []):
        kind = gen.get("kind", "transcendental")
        g = ctx.add_generator(gen["name"], kind, invertible=gen.get("invertible", False),
                              display=gen.get("display"))
        for d, rule in gen.get("derivatives", {}).items():
            ctx.set_derivative(g, d, ctx.expr(rule))
    for atom in spec.get("atoms", []):
        ctx.add_atom(atom["name"], ctx.expr(atom["expansion"]))
    for gen in spec.get("algebraic", []):
        g = ctx.add_generator(gen["name"], "transcendental")
        ctx.set_power_rule(g, gen.get("power", 2), ctx.expr(gen["reduces_to"]))
        if "inverse" in gen:
            ctx.set_inverse_hint(g, ctx.expr(gen["inverse"]))
        for d, rule in gen.get("derivatives", {}).items():
            ctx.set_derivative(g, d, ctx.expr(rule))
    for entry in spec.get("log_atoms", []):
        atom = ctx.atom_by_name[entry["atom"]]
        g = ctx.add_generator(entry["name"], "transcendental", display=entry.get("display"))
        inv_atom = SymExpr(ctx, {(): Fraction(1)}, ((atom.index, 1),))
        for direction in list(ctx.gens):
            if direction.kind == "transcendental":
                continue
            d_atom = atom.poly.diff(direction)
            if not d_atom.is_zero():
                ctx.set_derivative(g, direction, d_atom * inv_atom)
    for gen in spec.get("opaque_periods", []):
        g = ctx.add_generator(gen["name"], "transcendental", display=gen.get("display"))
        for d, rule in gen.get("derivatives", {}).items():
            ctx.set_derivative(g, d, ctx.expr(rule))
    return ctx


def load_manifold(source) -> GFManifold:
    """Parse a manifold spec (path, JSON text, or dict) into a GFManifold."""
    if isinstance(source, dict):
        spec = source
    else:
        text = source
        try:
            if "\n" not in str(source) and str(source).endswith(".json"):
                with open(source) as fh:
                    text = fh.read()
            spec = json.loads(text)
        except (OSError, json.JSONDecodeError) as err:
            raise ManifoldError(f"cannot read manifold spec: {err}")
    for field in ("dimension", "coordinates", "eta", "potential", "euler", "mu", "charge"):
        if field not in spec:
            raise ManifoldError(f"manifold spec missing field {field!r}")
    if spec["dimension"] != len(spec["coordinates"]):
        raise ManifoldError("field 'dimension' disagrees with 'coordinates'")
    ctx = build_context(spec)
    try:
        return GFManifold(
            ctx,
            spec["coordinates"],
            spec["eta"],
            ctx.expr(spec["potential"]),
            [ctx.expr(s) for s in spec["euler"]],
            spec["mu"],
            {int(k): v for k, v in spec.get("R", {}).items()},
            spec["charge"],
            c_consts=spec.get("c_consts", {}),
            name=spec.get("name", "manifold"),
            gauge_overrides=spec.get("gauge_overrides", {}),
            period_data=spec.get("period"),
            meta={k: spec[k] for k in spec if k.startswith("x-")},
        )
    except ContextError as err:
        raise ManifoldError(f"manifold spec field error: {err}")


# -- exact rational matrix helpers -------------------------------------------


def _rat_det(m):
    n = len(m)
    a = [row[:] for row in m]
    det = Fraction(1)
    for c in range(n):
        p = None
        for r in range(c, n):
            if a[r][c]:
                p = r
                break
        if p is None:
            return Fraction(0)
        if p != c:
            a[c], a[p] = a[p], a[c]
            det = -det
        det *= a[c][c]
        inv = 1 / a[c][c]
        for r in range(c + 1, n):
            if a[r][c]:
                f = a[r][c] * inv
                a[r] = [x - f * y for x, y in zip(a[r], a[c])]
    return det


def _rat_inv(m):
    n = len(m)
    a = [row[:] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(m)]
    for c in range(n):
        p = None
        for r in range(c, n):
            if a[r][c]:
                p = r
                break
        if p is None:
            raise ManifoldError("singular matrix")
        a[c], a[p] = a[p], a[c]
        pv = a[c][c]
        a[c] = [x / pv for x in a[c]]
        for r in range(n):
            if r != c and a[r][c]:
                f = a[r][c]
                a[r] = [x - f * y for x, y in zip(a[r], a[c])]
    return [row[n:] for row in a]
