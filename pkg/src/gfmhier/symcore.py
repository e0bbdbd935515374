"""Exact symbolic kernel.

Everything downstream works over a small computer-algebra layer defined here:

* a ``Context`` declares named generators (coordinates, jet variables,
  transcendental functions, formal parameters) together with their
  differentiation rules and optional power-rewrite rules such as
  ``sqrtD^2 -> D``;
* a ``SymExpr`` is a sparse rational-coefficient polynomial in those
  generators, divided by a monomial in registered *atoms* (fixed polynomial
  denominators such as ``v^2 - lam``);
* ``TruncatedSeries`` layers order-tracked Laurent series on top;
* ``ExprMatrix`` and ``linear_solve`` give small exact linear algebra.

All arithmetic is exact (``fractions.Fraction``); no floats anywhere.
Values are immutable after construction and safe to share between tasks.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Mapping, Sequence, Union

Rational = Fraction
Coeff = Union[int, Fraction]

__all__ = [
    "Rational",
    "Generator",
    "Atom",
    "Context",
    "SymExpr",
    "TruncatedSeries",
    "ExprMatrix",
    "LinearSolution",
    "linear_solve",
    "pochhammer_rising",
    "ContextError",
    "DivisionError_",
    "IntegrationError",
]


class ContextError(Exception):
    pass


class DivisionError_(Exception):
    pass


class IntegrationError(Exception):
    pass


class Generator:
    """A named symbol with differentiation and rewrite rules.

    kind is one of ``coordinate``, ``jet``, ``transcendental``, ``parameter``.
    ``derivs`` maps direction-generator index -> SymExpr (missing = 0, self = 1).
    ``power_rule`` rewrites self^k -> expr; ``inverse_hint`` expresses 1/self.
    """

    __slots__ = (
        "name", "kind", "index", "invertible", "derivs", "power_rule",
        "inverse_hint", "coord", "jet_order", "display",
    )

    def __init__(self, name, kind, index, invertible=False, coord=None, jet_order=0, display=None):
        self.name = name
        self.kind = kind
        self.index = index
        self.invertible = invertible
        self.derivs = {}
        self.power_rule = None
        self.inverse_hint = None
        self.coord = coord
        self.jet_order = jet_order
        self.display = display or name

    def __repr__(self):
        return f"Generator({self.name})"


class Atom:
    """A registered polynomial denominator (e.g. v^2 - lam).

    ``main`` is the highest-index generator occurring in the expansion; the
    leading coefficient in that variable must be a single term so that exact
    division reduces to univariate polynomial division.
    """

    __slots__ = ("name", "index", "poly", "main", "deg", "lead_mono", "lead_coeff", "by_deg")

    def __init__(self, name, index, poly):
        self.name = name
        self.index = index
        self.poly = poly
        main = -1
        for m in poly.terms:
            for g, _ in m:
                if g > main:
                    main = g
        if main < 0:
            raise ContextError(f"atom {name!r} must not be constant")
        self.main = main
        by_deg: dict[int, dict] = {}
        for m, c in poly.terms.items():
            e = 0
            rest = []
            for g, ee in m:
                if g == main:
                    e = ee
                else:
                    rest.append((g, ee))
            by_deg.setdefault(e, {})[tuple(rest)] = c
        self.deg = max(by_deg)
        self.by_deg = by_deg
        top = by_deg[self.deg]
        if len(top) != 1:
            raise ContextError(f"atom {name!r}: leading coefficient must be a single term")
        (self.lead_mono, self.lead_coeff), = top.items()

    def __repr__(self):
        return f"Atom({self.name})"


class Context:
    """Registry of generators and atoms; factory for expressions."""

    def __init__(self):
        self.gens: list[Generator] = []
        self.by_name: dict[str, Generator] = {}
        self.atoms: list[Atom] = []
        self.atom_by_name: dict[str, Atom] = {}
        self._jets: dict[tuple[str, int], Generator] = {}
        self._power_gens: set[int] = set()
        self._checked_gens: set[int] = set()  # non-invertible: reject negative powers
        self._resid_vals: dict[int, int] = {}  # generator -> residue sample
        self._atom_resid: dict[int, list] = {}
        self._mono_resid: dict = {}
        self.grade_cap = None     # optional (weights dict, max degree) guard


    def _resid(self, g):
        """Deterministic pseudo-random residue for divisibility pre-tests."""
        v = self._resid_vals.get(g)
        if v is None:
            x = (g + 1) * 0x9E3779B97F4A7C15 & ((1 << 64) - 1)
            x ^= x >> 31
            x = x * 0xBF58476D1CE4E5B9 & ((1 << 64) - 1)
            x ^= x >> 27
            v = (x % (_RESID_P - 2)) + 2
            self._resid_vals[g] = v
        return v

    # -- declaration ------------------------------------------------------

    def add_generator(self, name, kind="transcendental", invertible=False,
                      coord=None, jet_order=0, display=None) -> Generator:
        if name in self.by_name or name in self.atom_by_name:
            raise ContextError(f"generator {name!r} already declared")
        g = Generator(name, kind, len(self.gens), invertible, coord, jet_order, display)
        self.gens.append(g)
        self.by_name[name] = g
        if not invertible:
            self._checked_gens.add(g.index)
        if kind in ("coordinate", "jet"):
            self._jets[(coord or name, jet_order)] = g
        return g

    def add_coordinate(self, name, invertible=False) -> Generator:
        return self.add_generator(name, "coordinate", invertible, coord=name, jet_order=0)

    def set_derivative(self, gen, direction, value):
        gen = self._gen(gen)
        direction = self._gen(direction)
        gen.derivs[direction.index] = self.expr(value)

    def set_power_rule(self, gen, exponent, value):
        gen = self._gen(gen)
        gen.power_rule = (exponent, self.expr(value))
        self._power_gens.add(gen.index)

    def set_inverse_hint(self, gen, value):
        self._gen(gen).inverse_hint = self.expr(value)

    def add_atom(self, name, poly) -> Atom:
        if name in self.atom_by_name or name in self.by_name:
            raise ContextError(f"atom {name!r} already declared")
        poly = self.expr(poly)
        if poly.den:
            raise ContextError(f"atom {name!r} must have a polynomial expansion")
        a = Atom(name, len(self.atoms), poly)
        self.atoms.append(a)
        self.atom_by_name[name] = a
        return a

    def jet(self, coord, order) -> Generator:
        """Jet generator d^order/dx^order of a coordinate, created on demand."""
        coord = self._gen(coord)
        base = coord.coord or coord.name
        key = (base, order)
        if key in self._jets:
            return self._jets[key]
        if order == 0:
            return coord
        if order == 1:
            disp = f"{base}_x"
        elif order == 2:
            disp = f"{base}_xx"
        else:
            disp = f"{base}^({order})"
        return self.add_generator(f"{base}_{order}", "jet", coord=base,
                                  jet_order=order, display=disp)

    def coordinates(self):
        return [g for g in self.gens if g.kind == "coordinate"]

    def _gen(self, g) -> Generator:
        if isinstance(g, Generator):
            return g
        try:
            return self.by_name[g]
        except KeyError:
            raise ContextError(f"unknown generator {g!r}")

    # -- expression factories ---------------------------------------------

    def zero(self) -> "SymExpr":
        return SymExpr(self, {}, (), _normalized=True)

    def one(self) -> "SymExpr":
        return self.const(1)

    def const(self, c) -> "SymExpr":
        c = Fraction(c)
        if c == 0:
            return self.zero()
        return SymExpr(self, {(): c}, (), _normalized=True)

    def var(self, name) -> "SymExpr":
        g = self._gen(name)
        return SymExpr(self, {((g.index, 1),): Fraction(1)}, (), _normalized=True)

    def expr(self, v) -> "SymExpr":
        if isinstance(v, SymExpr):
            if v.ctx is not self:
                raise ContextError("expression belongs to a different context")
            return v
        if isinstance(v, (int, Fraction)):
            return self.const(v)
        if isinstance(v, str):
            from .exprparse import parse_expr
            return parse_expr(self, v)
        raise ContextError(f"cannot coerce {v!r} to SymExpr")


def _mono_mul(m1, m2):
    if not m1:
        return m2
    if not m2:
        return m1
    out = []
    i = j = 0
    n1, n2 = len(m1), len(m2)
    while i < n1 and j < n2:
        g1, e1 = m1[i]
        g2, e2 = m2[j]
        if g1 < g2:
            out.append(m1[i])
            i += 1
        elif g1 > g2:
            out.append(m2[j])
            j += 1
        else:
            e = e1 + e2
            if e:
                out.append((g1, e))
            i += 1
            j += 1
    out.extend(m1[i:])
    out.extend(m2[j:])
    return tuple(out)


class SymExpr:
    """Sparse exact expression: polynomial numerator / monomial of atoms.

    terms: dict monomial -> Fraction, monomial = sorted tuple of
    (generator index, exponent); den: sorted tuple of (atom index, power>0).
    Canonical after every operation: no zero coefficients, power rules
    applied, numerator not divisible by any denominator atom.
    """

    __slots__ = ("ctx", "terms", "den", "_hash")

    def __init__(self, ctx, terms, den, _normalized=False):
        self.ctx = ctx
        self._hash = None
        if _normalized:
            self.terms = terms
            self.den = den
        else:
            self.terms, self.den = _normalize(ctx, terms, den)

    # -- basics ------------------------------------------------------------

    def is_zero(self):
        return not self.terms

    def is_const(self):
        return not self.den and (not self.terms or set(self.terms) == {()})

    def const_value(self) -> Fraction:
        if not self.is_const():
            raise ValueError(f"not a constant: {self}")
        return self.terms.get((), Fraction(0))

    def __bool__(self):
        return bool(self.terms)

    def __len__(self):
        return len(self.terms)

    def __eq__(self, other):
        if isinstance(other, (int, Fraction)):
            other = self.ctx.const(other)
        if not isinstance(other, SymExpr):
            return NotImplemented
        if self.den == other.den:
            return self.terms == other.terms
        return (self - other).is_zero()

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((frozenset(self.terms.items()), self.den))
        return self._hash

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, SymExpr):
            return other
        if isinstance(other, (int, Fraction)):
            return self.ctx.const(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        if self.is_zero():
            return other
        if other.is_zero():
            return self
        if self.den == other.den:
            t = dict(self.terms)
            for m, c in other.terms.items():
                c2 = t.get(m, 0) + c
                if c2:
                    t[m] = c2
                else:
                    del t[m]
            return SymExpr(self.ctx, t, self.den)
        d1, d2 = dict(self.den), dict(other.den)
        lcm = dict(d1)
        for a, e in d2.items():
            lcm[a] = max(lcm.get(a, 0), e)
        t = _poly_mul_terms(self.ctx, self.terms, _den_terms(self.ctx, lcm, d1))
        for m, c in _poly_mul_terms(self.ctx, other.terms, _den_terms(self.ctx, lcm, d2)).items():
            c2 = t.get(m, 0) + c
            if c2:
                t[m] = c2
            else:
                del t[m]
        return SymExpr(self.ctx, t, tuple(sorted(lcm.items())))

    __radd__ = __add__

    def __neg__(self):
        return SymExpr(self.ctx, {m: -c for m, c in self.terms.items()}, self.den,
                       _normalized=True)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        if self.is_zero() or other.is_zero():
            return self.ctx.zero()
        d = dict(self.den)
        for a, e in other.den:
            d[a] = d.get(a, 0) + e
        t = _poly_mul_terms(self.ctx, self.terms, other.terms)
        return SymExpr(self.ctx, t, tuple(sorted(d.items())))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self * other.invert()

    def __rtruediv__(self, other):
        return self.invert() * other

    def __pow__(self, n):
        if not isinstance(n, int):
            return NotImplemented
        if n < 0:
            return self.invert() ** (-n)
        result = self.ctx.one()
        base = self
        while n:
            if n & 1:
                result = result * base
            n >>= 1
            if n:
                base = base * base
        return result

    def invert(self) -> "SymExpr":
        """1/self; defined when self factors into atoms and unit monomials."""
        if self.is_zero():
            raise DivisionError_("division by zero")
        ctx = self.ctx
        den_expr = ctx.one()
        for a, e in self.den:
            den_expr = den_expr * ctx.atoms[a].poly ** e
        atom_pow: dict[int, int] = {}
        work_terms = self.terms
        changed = True
        while changed and len(work_terms) > 1:
            changed = False
            for atom in ctx.atoms:
                q = _exact_divide(ctx, work_terms, atom)
                if q is not None:
                    atom_pow[atom.index] = atom_pow.get(atom.index, 0) + 1
                    work_terms = q
                    changed = True
                    break
        if len(work_terms) != 1:
            raise DivisionError_(
                f"cannot invert multi-term expression {self.canonical()}; "
                "declare a denominator atom")
        (mono, coeff), = work_terms.items()
        inv = ctx.const(Fraction(1) / coeff)
        for g, e in mono:
            gen = ctx.gens[g]
            if gen.invertible:
                inv = inv * SymExpr(ctx, {((g, -e),): Fraction(1)}, (), _normalized=True)
            elif gen.inverse_hint is not None:
                inv = inv * gen.inverse_hint ** e
            else:
                raise DivisionError_(f"generator {gen.name} is not invertible")
        if atom_pow:
            inv = inv * SymExpr(ctx, {(): Fraction(1)}, tuple(sorted(atom_pow.items())),
                                _normalized=True)
        return inv * den_expr

    # -- calculus -----------------------------------------------------------

    def diff(self, direction) -> "SymExpr":
        """Partial derivative along a generator (Leibniz + declared rules)."""
        g = self.ctx._gen(direction)
        num = SymExpr(self.ctx, self.terms, (), _normalized=True)
        dnum = _poly_diff(self.ctx, num, g)
        if not self.den:
            return dnum
        result = dnum * SymExpr(self.ctx, {(): Fraction(1)}, self.den, _normalized=True)
        for a, e in self.den:
            atom = self.ctx.atoms[a]
            datom = _poly_diff(self.ctx, atom.poly, g)
            if datom.is_zero():
                continue
            d = dict(self.den)
            d[a] = e + 1
            result = result - e * num * datom * SymExpr(
                self.ctx, {(): Fraction(1)}, tuple(sorted(d.items())), _normalized=True)
        return result

    def xdiff(self) -> "SymExpr":
        """Total x-derivative on the jet space (coordinates depend on x).

        Differentiates along coordinate/jet directions only; dependence of
        transcendental generators on the coordinates is picked up by the
        chained partials, never double counted.
        """
        ctx = self.ctx
        result = ctx.zero()
        for gen in jet_directions(ctx, self):
            d = self.diff(gen)
            if d.is_zero():
                continue
            result = result + d * ctx.var(ctx.jet(gen.coord, gen.jet_order + 1))
        return result

    def subs(self, mapping: Mapping) -> "SymExpr":
        """Substitute generators by expressions (exact; denominators re-derived)."""
        ctx = self.ctx
        table: dict[int, SymExpr] = {}
        for k, v in mapping.items():
            table[ctx._gen(k).index] = ctx.expr(v)
        out = ctx.zero()
        for m, c in self.terms.items():
            term = ctx.const(c)
            for g, e in m:
                if g in table:
                    base = table[g]
                    term = term * (base ** e if e >= 0 else base.invert() ** (-e))
                else:
                    term = term * SymExpr(ctx, {((g, e),): Fraction(1)}, (), _normalized=True)
            out = out + term
    # substituting inside denominator atoms
        for a, e in self.den:
            sub_atom = ctx.atoms[a].poly.subs(mapping)
            out = out * sub_atom.invert() ** e
        return out

    def coefficient_map(self, gen) -> dict[int, "SymExpr"]:
        """Split by the exponent of one generator (must not hide in atoms)."""
        g = self.ctx._gen(gen)
        for a, _ in self.den:
            if not self.ctx.atoms[a].poly.diff(g).is_zero():
                raise ContextError(f"{g.name} occurs inside denominator atom")
        out: dict[int, dict] = {}
        for m, c in self.terms.items():
            e = 0
            rest = []
            for gi, ei in m:
                if gi == g.index:
                    e = ei
                else:
                    rest.append((gi, ei))
            out.setdefault(e, {})[tuple(rest)] = c
        return {e: SymExpr(self.ctx, t, self.den) for e, t in sorted(out.items())}

    # -- integration ---------------------------------------------------------

    def integrate(self, coord) -> "SymExpr":
        """Antiderivative along one coordinate, term by term.

        Covers the shapes the recursion machinery produces: coordinate powers
        times passive factors, a single log-type factor (rule a/x), or
        exponential-type factors (rule a*self).  Raises IntegrationError when
        the primitive is outside the declared generator closure.
        """
        g = self.ctx._gen(coord)
        active = [a for a, _ in self.den
                  if not self.ctx.atoms[a].poly.diff(g).is_zero()]
        if active:
            return _integrate_with_atom(self, g, active)
        result = self.ctx.zero()
        den = SymExpr(self.ctx, {(): Fraction(1)}, self.den, _normalized=True)
        for m, c in self.terms.items():
            result = result + _integrate_monomial(self.ctx, m, c, g) * den
        return result

    # -- output ---------------------------------------------------------------

    def canonical(self) -> str:
        """Deterministic text form (valid parser input); used by goldens/cache."""
        if not self.terms:
            return "0"
        parts = []
        for m, c in sorted(self.terms.items()):
            factors = []
            if c.denominator == 1:
                factors.append(str(c.numerator))
            else:
                factors.append(f"{c.numerator}/{c.denominator}")
            for g, e in m:
                name = self.ctx.gens[g].name
                factors.append(name if e == 1 else f"{name}^{e}")
            parts.append("*".join(factors))
        body = " + ".join(parts)
        if not self.den:
            return body
        dparts = []
        for a, e in self.den:
            name = self.ctx.atoms[a].name
            dparts.append(name if e == 1 else f"{name}^{e}")
        return f"({body})/({'*'.join(dparts)})"

    def __repr__(self):
        return self.canonical()


# -- internal polynomial helpers -------------------------------------------


def _normalize(ctx, terms, den):
    terms = _apply_power_rules(ctx, terms)
    if isinstance(den, dict):
        den = tuple(sorted((a, e) for a, e in den.items() if e))
    if den and terms:
        den_d = dict(den)
        changed = True
        while changed and terms:
            changed = False
            for a in list(den_d):
                q = _exact_divide(ctx, terms, ctx.atoms[a])
                if q is not None:
                    terms = q
                    den_d[a] -= 1
                    if not den_d[a]:
                        del den_d[a]
                    changed = True
        den = tuple(sorted(den_d.items()))
    if not terms:
        den = ()
    return terms, den


def _apply_power_rules(ctx, terms):
    """Rewrite g^e for generators with power rules; validate negative powers."""
    power_gens = ctx._power_gens
    checked = ctx._checked_gens
    out = {}
    work = None
    for m, c in terms.items():
        if not c:
            continue
        special = False
        for g, e in m:
            if g in power_gens and (e >= ctx.gens[g].power_rule[0] or e < 0):
                special = True
                break
            if e < 0 and g in checked:
                raise DivisionError_(
                    f"negative power of non-invertible {ctx.gens[g].name}")
        if not special:
            c0 = out.get(m, 0) + c
            if c0:
                out[m] = c0
            else:
                del out[m]
            continue
        if work is None:
            work = []
        work.append((m, c))
    while work:
        m, c = work.pop()
        hit = None
        for g, e in m:
            if g in power_gens and (e >= ctx.gens[g].power_rule[0] or e < 0):
                hit = (g, e)
                break
            if e < 0 and g in checked:
                raise DivisionError_(
                    f"negative power of non-invertible {ctx.gens[g].name}")
        if hit is None:
            c0 = out.get(m, 0) + c
            if c0:
                out[m] = c0
            else:
                del out[m]
            continue
        g, e = hit
        k, repl = ctx.gens[g].power_rule
        q, r = divmod(e, k)
        rest = tuple((gi, ei) for gi, ei in m if gi != g)
        if r:
            rest = _mono_mul(rest, ((g, r),))
        repl_q = repl ** q
        for m2, c2 in repl_q.terms.items():
            work.append((_mono_mul(rest, m2), c * c2))
        if repl_q.den:
            # inverse powers of the replacement reintroduce a denominator:
            # push it onto every generated term via a final multiply
            raise ContextError(
                "power rule replacement must invert to a polynomial")
    return out


def _grade(weights, m):
    d = 0
    for g, e in m:
        w = weights.get(g)
        if w:
            d += w * e
    return d


def _poly_mul_terms(ctx, t1, t2):
    cap = ctx.grade_cap
    out = {}
    if cap is not None:
        weights, top = cap
        b1: dict[int, list] = {}
        for m, c in t1.items():
            b1.setdefault(_grade(weights, m), []).append((m, c))
        b2: dict[int, list] = {}
        for m, c in t2.items():
            b2.setdefault(_grade(weights, m), []).append((m, c))
        for d1, terms1 in b1.items():
            for d2, terms2 in b2.items():
                if d1 + d2 > top:
                    continue
                for m1, c1 in terms1:
                    for m2, c2 in terms2:
                        m = _mono_mul(m1, m2)
                        c = out.get(m, 0) + c1 * c2
                        if c:
                            out[m] = c
                        else:
                            del out[m]
        return _apply_power_rules(ctx, out)
    if len(t1) > len(t2):
        t1, t2 = t2, t1
    for m1, c1 in t1.items():
        for m2, c2 in t2.items():
            m = _mono_mul(m1, m2)
            c = out.get(m, 0) + c1 * c2
            if c:
                out[m] = c
            else:
                del out[m]
    return _apply_power_rules(ctx, out)


def _den_terms(ctx, lcm, have):
    """Terms of prod(atom^(lcm-have)) as a plain polynomial."""
    t = {(): Fraction(1)}
    for a, e in lcm.items():
        extra = e - have.get(a, 0)
        if extra:
            t = _poly_mul_terms(ctx, t, (ctx.atoms[a].poly ** extra).terms)
    return t


def _split_by_main(terms, main):
    by_deg: dict[int, dict] = {}
    for m, c in terms.items():
        e = 0
        rest = []
        for g, ee in m:
            if g == main:
                e = ee
            else:
                rest.append((g, ee))
        by_deg.setdefault(e, {})[tuple(rest)] = c
    return by_deg


_RESID_P = (1 << 61) - 1


def _fast_divisible(ctx, terms, atom):
    """Necessary condition for divisibility: univariate residue division.

    All generators except the atom's main variable are evaluated at fixed
    pseudo-random residues mod a prime; the resulting univariate polynomial
    must be divisible by the atom's residue polynomial.  A false positive
    has probability ~ deg/p per monomial; false negatives are impossible,
    so skipping on failure never breaks exactness (only canonicality, and
    deterministically so).
    """
    main = atom.main
    P = _RESID_P
    akey = atom.index
    aresid = ctx._atom_resid.get(akey)
    if aresid is None:
        adeg = atom.deg
        aresid = [0] * (adeg + 1)
        for e, part in atom.by_deg.items():
            acc = 0
            for mono, coeff in part.items():
                v = (coeff.numerator * pow(coeff.denominator, -1, P)) % P
                for g, ee in mono:
                    v = v * pow(ctx._resid(g), ee % (P - 1), P) % P
                acc = (acc + v) % P
            aresid[e] = acc
        ctx._atom_resid[akey] = aresid
    dense = {}
    lo = 0
    cache = ctx._mono_resid
    for mono, coeff in terms.items():
        key = (main, mono)
        ev = cache.get(key)
        if ev is None:
            e = 0
            v = 1
            for g, ee in mono:
                if g == main:
                    e = ee
                else:
                    v = v * pow(ctx._resid(g), ee % (P - 1), P) % P
            ev = (e, v)
            cache[key] = ev
        e, v = ev
        v = v * (coeff.numerator % P) % P * pow(coeff.denominator, -1, P) % P
        dense[e] = (dense.get(e, 0) + v) % P
        if e < lo:
            lo = e
    top = max(dense)
    deg = atom.deg
    if top - lo < deg:
        return False
    # synthetic division, degrees descending
    lead = aresid[deg]
    lead_inv = pow(lead, -1, P)
    work = dict(dense)
    for k in range(top, lo + deg - 1, -1):
        c = work.get(k, 0)
        if not c:
            continue
        f = c * lead_inv % P
        for e2, a2 in enumerate(aresid):
            if a2:
                kk = k - deg + e2
                work[kk] = (work.get(kk, 0) - f * a2) % P
    return not any(work.values())


def _exact_divide(ctx, terms, atom):
    """terms / atom.poly if the division is exact, else None.

    Polynomial division in the atom's main variable; the atom's leading
    coefficient there is a single term, so each step is a monomial division.
    """
    if not terms:
        return None
    if len(terms) > 8:
        if not _fast_divisible(ctx, terms, atom):
            return None
    num = _split_by_main(terms, atom.main)
    top = max(num)
    bot = min(num)
    if top - bot < atom.deg:
        return None
    lead_mono = atom.lead_mono
    lead_coeff = atom.lead_coeff
    checked = ctx._checked_gens
    quo: dict[tuple, Fraction] = {}
    for k in range(top, bot + atom.deg - 1, -1):
        part = num.get(k)
        if not part:
            continue
        qk = k - atom.deg
        qpart = {}
        for m, c in part.items():
            # divide monomial by lead_mono
            t = dict(m)
            for g, e in lead_mono:
                e2 = t.get(g, 0) - e
                if e2 < 0 and g in checked:
                    return None
                if e2:
                    t[g] = e2
                else:
                    t.pop(g, None)
            qpart[tuple(sorted(t.items()))] = c / lead_coeff
        # subtract qpart * atom from num
        for d, apart in atom.by_deg.items():
            tgt = num.setdefault(qk + d, {})
            for mq, cq in qpart.items():
                for ma, ca in apart.items():
                    mm = _mono_mul(mq, ma)
                    cc = tgt.get(mm, 0) - cq * ca
                    if cc:
                        tgt[mm] = cc
                    else:
                        tgt.pop(mm, None)
        if num.get(k):
            return None
        num.pop(k, None)
        for mq, cq in qpart.items():
            mono = _mono_mul(mq, ((atom.main, qk),) if qk else ())
            c0 = quo.get(mono, 0) + cq
            if c0:
                quo[mono] = c0
            else:
                del quo[mono]
    if any(num.values()):
        return None
    return _apply_power_rules(ctx, quo)


def _poly_diff(ctx, expr, g):
    out = ctx.zero()
    for m, c in expr.terms.items():
        for i, (gi, ei) in enumerate(m):
            gen = ctx.gens[gi]
            if gi == g.index:
                dg = None  # rule is 1
            else:
                dg = gen.derivs.get(g.index)
                if dg is None:
                    continue
            rest = list(m)
            if ei == 1:
                rest.pop(i)
            else:
                rest[i] = (gi, ei - 1)
            base = SymExpr(ctx, {tuple(rest): c * ei}, ())
            out = out + (base if dg is None else base * dg)
    return out


def jet_directions(ctx, expr):
    """Coordinate/jet generators a jet expression can vary along.

    Includes directions reached through the derivative rules of the
    transcendental generators present (rules are keyed by coordinate, jet
    or parameter directions, so one level of indirection suffices).
    """
    seen = set()
    for m in expr.terms:
        for g, _ in m:
            seen.add(g)
    for a, _ in expr.den:
        for m in ctx.atoms[a].poly.terms:
            for g, _ in m:
                seen.add(g)
    dirs = {}
    pending = list(seen)
    visited = set()
    while pending:
        gi = pending.pop()
        if gi in visited:
            continue
        visited.add(gi)
        gen = ctx.gens[gi]
        if gen.kind in ("coordinate", "jet"):
            dirs[gi] = gen
        elif gen.kind == "transcendental":
            for d in gen.derivs:
                pending.append(d)
    return [dirs[k] for k in sorted(dirs)]


def _integrate_monomial(ctx, mono, coeff, g):
    power = 0
    log_fac = []  # (gen, exp, a) with d gen = a/x
    exp_fac = []  # (gen, exp, a) with d gen = a*gen
    passive = []
    x = ctx.var(g)
    for gi, ei in mono:
        gen = ctx.gens[gi]
        if gi == g.index:
            power = ei
            continue
        rule = gen.derivs.get(g.index)
        if rule is None or rule.is_zero():
            passive.append((gi, ei))
            continue
        ratio_log = rule * x
        if ratio_log.is_const():
            log_fac.append((gen, ei, ratio_log.const_value()))
            continue
        try:
            ratio_exp = rule * ctx.var(gen).invert()
        except DivisionError_:
            raise IntegrationError(f"no rule to integrate {gen.name} along {g.name}")
        if ratio_exp.is_const():
            exp_fac.append((gen, ei, ratio_exp.const_value()))
        else:
            raise IntegrationError(f"no rule to integrate {gen.name} along {g.name}")
    rest = SymExpr(ctx, {tuple(passive): coeff}, ())
    if log_fac and exp_fac:
        raise IntegrationError("mixed log/exp factors along one coordinate")
    if exp_fac:
        a = sum(e * r for _, e, r in exp_fac)
        if a == 0:
            raise IntegrationError("degenerate exponential factor")
        t = ctx.one()
        for gen, e, _ in exp_fac:
            t = t * ctx.var(gen) ** e
        if power < 0:
            raise IntegrationError("x^-n * exp(a x) has no primitive in the closure")
        acc = ctx.zero()
        c = Fraction(1)
        for j in range(power, -1, -1):
            c = c / a if j == power else -c * Fraction(j + 1) / a
            acc = acc + ctx.const(c) * x ** j
        return rest * acc * t
    if log_fac:
        if len(log_fac) > 1 or log_fac[0][1] != 1:
            raise IntegrationError("only a single first-power log factor supported")
        gen, _, a = log_fac[0]
        ell = ctx.var(gen)
        n = power
        if n == -1:
            return rest * ell * ell / (2 * a)
        return rest * (x ** (n + 1) * ell / (n + 1) - a * x ** (n + 1) / Fraction((n + 1) ** 2))
    if power == -1:
        for gen in ctx.gens:
            r = gen.derivs.get(g.index)
            if r is None:
                continue
            if (r * x - ctx.one()).is_zero():
                return rest * ctx.var(gen)
        raise IntegrationError(
            f"primitive log({g.name}) not declared; add a log generator")
    return rest * x ** (power + 1) / (power + 1)


def _integrate_with_atom(expr, g, active):
    """Integrate A-rational terms along g by the substitution u = A.

    Requires a single active atom A, linear in g with constant slope; the
    remaining g-dependence of the numerator must run through g itself.
    """
    ctx = expr.ctx
    if len(active) != 1:
        raise IntegrationError(f"several denominator atoms vary along {g.name}")
    atom = ctx.atoms[active[0]]
    slope = atom.poly.diff(g)
    if not slope.is_const() or not atom.poly.diff(g).diff(g).is_zero():
        raise IntegrationError(
            f"denominator atom {atom.name} is not linear in {g.name}")
    c = slope.const_value()
    x = ctx.var(g)
    rest = atom.poly - c * x  # g-free remainder of the atom
    if not rest.diff(g).is_zero():
        raise IntegrationError(f"atom {atom.name} remainder depends on {g.name}")
    m_pow = dict(expr.den)[atom.index]
    other_den = tuple((a, e) for a, e in expr.den if a != atom.index)
    num = SymExpr(ctx, expr.terms, (), _normalized=True)
    # the numerator's g-dependence must be polynomial in g itself
    for mono in num.terms:
        for gi, _ in mono:
            gen = ctx.gens[gi]
            if gi != g.index and gen.derivs.get(g.index):
                raise IntegrationError(
                    f"{gen.name} varies along {g.name} under an atom denominator")
    # rewrite num as a polynomial in u = A: g = (u - rest)/c
    by_g = num.coefficient_map(g)
    by_u: dict[int, SymExpr] = {}
    for j, coeff in by_g.items():
        if j < 0:
            raise IntegrationError("negative coordinate power under atom denominator")
        # ((u - rest)/c)^j expanded in powers of u
        binom = {0: ctx.one()}
        for _ in range(j):
            nxt = {}
            for k, val in binom.items():
                nxt[k + 1] = nxt.get(k + 1, ctx.zero()) + val / c
                nxt[k] = nxt.get(k, ctx.zero()) - val * rest / c
            binom = nxt
        for k, val in binom.items():
            by_u[k] = by_u.get(k, ctx.zero()) + coeff * val
    inv_atom = SymExpr(ctx, {(): Fraction(1)}, ((atom.index, 1),), _normalized=True)
    out = ctx.zero()
    for k, coeff in by_u.items():
        e = k - m_pow
        if e == -1:
            log_gen = None
            target = slope * inv_atom
            for gen in ctx.gens:
                rule = gen.derivs.get(g.index)
                if rule is not None and (rule - target).is_zero():
                    log_gen = gen
                    break
            if log_gen is None:
                raise IntegrationError(
                    f"primitive log({atom.name}) not declared; add a log_atom generator")
            out = out + coeff * ctx.var(log_gen) / c
        elif e >= 0:
            out = out + coeff * atom.poly ** (e + 1) / (c * (e + 1))
        else:
            out = out + coeff * inv_atom ** (-(e + 1)) / (c * (e + 1))
    return out * SymExpr(ctx, {(): Fraction(1)}, other_den, _normalized=True)


# -- truncated series --------------------------------------------------------


class TruncatedSeries:
    """Laurent series in one parameter with a tracked truncation order.

    Exponents above ``order`` are unknown (not zero).  Arithmetic tracks the
    worst-case order of the operands.
    """

    __slots__ = ("ctx", "param", "coeffs", "order")

    def __init__(self, ctx, param, coeffs, order):
        self.ctx = ctx
        self.param = ctx._gen(param)
        self.order = order
        self.coeffs = {e: c for e, c in coeffs.items() if e <= order and not c.is_zero()}

    @classmethod
    def from_expr(cls, ctx, param, expr, order):
        expr = ctx.expr(expr)
        return cls(ctx, param, expr.coefficient_map(param), order)

    def _wrap(self, other):
        if isinstance(other, TruncatedSeries):
            return other
        return TruncatedSeries(self.ctx, self.param, {0: self.ctx.expr(other)}, self.order)

    def __add__(self, other):
        other = self._wrap(other)
        order = min(self.order, other.order)
        out = dict(self.coeffs)
        for e, c in other.coeffs.items():
            out[e] = out.get(e, self.ctx.zero()) + c
        return TruncatedSeries(self.ctx, self.param, out, order)

    __radd__ = __add__

    def __neg__(self):
        return TruncatedSeries(self.ctx, self.param,
                               {e: -c for e, c in self.coeffs.items()}, self.order)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, Fraction, SymExpr)):
            c = self.ctx.expr(other)
            return TruncatedSeries(self.ctx, self.param,
                                   {e: v * c for e, v in self.coeffs.items()}, self.order)
        if not self.coeffs or not other.coeffs:
            return TruncatedSeries(self.ctx, self.param, {}, min(self.order, other.order))
        m1, m2 = min(self.coeffs), min(other.coeffs)
        order = min(self.order + m2, other.order + m1)
        out = {}
        for e1, c1 in self.coeffs.items():
            for e2, c2 in other.coeffs.items():
                e = e1 + e2
                if e > order:
                    continue
                out[e] = out.get(e, self.ctx.zero()) + c1 * c2
        return TruncatedSeries(self.ctx, self.param, out, order)

    __rmul__ = __mul__

    def negative_part(self):
        """Keep exponents <= -1 (strictly negative powers)."""
        return TruncatedSeries(self.ctx, self.param,
                               {e: c for e, c in self.coeffs.items() if e <= -1},
                               self.order)

    def coefficient(self, e):
        if e > self.order:
            raise ValueError(f"coefficient {e} beyond truncation order {self.order}")
        return self.coeffs.get(e, self.ctx.zero())

    def is_zero(self):
        return not self.coeffs

    def __repr__(self):
        name = self.param.name
        bits = [f"({c.canonical()})*{name}^{e}" for e, c in sorted(self.coeffs.items())]
        tail = f"O({name}^{self.order + 1})"
        return " + ".join(bits + [tail])


# -- matrices and exact linear algebra ---------------------------------------


class ExprMatrix:
    """Dense matrix of SymExpr with exact operations."""

    __slots__ = ("ctx", "rows", "cols", "data")

    def __init__(self, ctx, data):
        self.ctx = ctx
        self.data = [[ctx.expr(v) for v in row] for row in data]
        self.rows = len(self.data)
        self.cols = len(self.data[0]) if self.data else 0
        for row in self.data:
            if len(row) != self.cols:
                raise ValueError("ragged matrix")

    @classmethod
    def identity(cls, ctx, n):
        return cls(ctx, [[1 if i == j else 0 for j in range(n)] for i in range(n)])

    def __getitem__(self, ij):
        return self.data[ij[0]][ij[1]]

    def __add__(self, other):
        return ExprMatrix(self.ctx, [[a + b for a, b in zip(r1, r2)]
                                     for r1, r2 in zip(self.data, other.data)])

    def __sub__(self, other):
        return ExprMatrix(self.ctx, [[a - b for a, b in zip(r1, r2)]
                                     for r1, r2 in zip(self.data, other.data)])

    def __mul__(self, other):
        if isinstance(other, ExprMatrix):
            if self.cols != other.rows:
                raise ValueError("dimension mismatch")
            return ExprMatrix(self.ctx, [
                [sum((self.data[i][k] * other.data[k][j] for k in range(self.cols)),
                     self.ctx.zero()) for j in range(other.cols)]
                for i in range(self.rows)])
        v = self.ctx.expr(other)
        return ExprMatrix(self.ctx, [[e * v for e in row] for row in self.data])

    __rmul__ = __mul__

    def transpose(self):
        return ExprMatrix(self.ctx, [[self.data[i][j] for i in range(self.rows)]
                                     for j in range(self.cols)])

    def det(self):
        if self.rows != self.cols:
            raise ValueError("det of non-square matrix")
        n = self.rows
        if n == 1:
            return self.data[0][0]
        if n == 2:
            return self.data[0][0] * self.data[1][1] - self.data[0][1] * self.data[1][0]
        out = self.ctx.zero()
        for j in range(n):
            minor = ExprMatrix(self.ctx, [row[:j] + row[j + 1:] for row in self.data[1:]])
            term = self.data[0][j] * minor.det()
            out = out + term if j % 2 == 0 else out - term
        return out

    def inverse(self):
        """Adjugate/determinant inverse; det must be atom-invertible."""
        n = self.rows
        det = self.det()
        inv_det = det.invert()
        if n == 1:
            return ExprMatrix(self.ctx, [[inv_det]])
        adj = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                minor = ExprMatrix(self.ctx, [
                    [self.data[r][c] for c in range(n) if c != j]
                    for r in range(n) if r != i])
                co = minor.det()
                adj[j][i] = co * inv_det if (i + j) % 2 == 0 else -co * inv_det
        return ExprMatrix(self.ctx, adj)

    def is_zero(self):
        return all(e.is_zero() for row in self.data for e in row)

    def __repr__(self):
        return "[" + "; ".join(", ".join(e.canonical() for e in row)
                               for row in self.data) + "]"


class LinearSolution:
    """Result of an exact linear solve over the rationals."""

    __slots__ = ("consistent", "rank", "particular", "nullspace", "free_columns")

    def __init__(self, consistent, rank, particular, nullspace, free_columns=None):
        self.consistent = consistent
        self.rank = rank
        self.particular = particular
        self.nullspace = nullspace
        self.free_columns = free_columns or []

    def unique(self):
        if not self.consistent:
            raise ValueError("inconsistent system")
        if self.nullspace:
            raise ValueError("solution not unique")
        return self.particular


def linear_solve(a_rows: Sequence[Sequence[Coeff]], b: Sequence[Coeff]) -> LinearSolution:
    """Exact Gaussian elimination: rank, particular solution, nullspace basis.

    Inconsistent systems are reported via the ``consistent`` flag.
    """
    m = len(a_rows)
    n = len(a_rows[0]) if m else 0
    aug = [[Fraction(x) for x in row] + [Fraction(b[i])] for i, row in enumerate(a_rows)]
    pivots = []
    r = 0
    for c in range(n):
        pr = None
        for i in range(r, m):
            if aug[i][c]:
                pr = i
                break
        if pr is None:
            continue
        aug[r], aug[pr] = aug[pr], aug[r]
        pv = aug[r][c]
        aug[r] = [x / pv for x in aug[r]]
        for i in range(m):
            if i != r and aug[i][c]:
                f = aug[i][c]
                aug[i] = [x - f * y for x, y in zip(aug[i], aug[r])]
        pivots.append(c)
        r += 1
        if r == m:
            break
    for i in range(r, m):
        if aug[i][n]:
            return LinearSolution(False, r, None, None)
    particular = [Fraction(0)] * n
    for i, c in enumerate(pivots):
        particular[c] = aug[i][n]
    free = [c for c in range(n) if c not in pivots]
    nullspace = []
    for fc in free:
        vec = [Fraction(0)] * n
        vec[fc] = Fraction(1)
        for i, c in enumerate(pivots):
            vec[c] = -aug[i][fc]
        nullspace.append(vec)
    return LinearSolution(True, r, particular, nullspace, free)


def pochhammer_rising(x, k: int):
    """Rising factorial x(x+1)...(x+k-1); x^[0] = 1. Requires k >= 0."""
    if k < 0:
        raise ValueError("pochhammer_rising needs k >= 0")
    if isinstance(x, SymExpr):
        out = x.ctx.one()
        for j in range(k):
            out = out * (x + j)
        return out
    out = Fraction(1)
    x = Fraction(x)
    for j in range(k):
        out *= x + j
    return out
