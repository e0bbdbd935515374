"""Hand-coded explicit coefficient tables for the four lowest operators.

These are straight transcriptions of the closed-form displays (index sums
over the monodromy constants), kept independent of the assembly engine so
the two can be compared term by term on any window.
"""

from __future__ import annotations

from fractions import Fraction

from .virasoro import VirasoroOperator, _sign


def _r_dag(m, h, s):
    """Covector (r_s)_a = (-1)^{s+1} r_s^b eta_{ab}."""
    rvec = h.r_realized.get(s)
    if not rvec:
        return None
    return [Fraction(_sign(s + 1)) * sum(rvec[b] * m.eta[a][b] for b in range(m.n))
            for a in range(m.n)]


def _r_low(m, h, s):
    """Covector (r_s)_a = r_s^b eta_{ab} (no sign; used by the m=0,1,2 sums)."""
    rvec = h.r_realized.get(s)
    if not rvec:
        return None
    return [sum(rvec[b] * m.eta[a][b] for b in range(m.n)) for a in range(m.n)]


def _R_pow(m, k):
    """{s: [R^k]_s} for the base matrices; k >= 1."""
    n = m.n
    if k == 1:
        return {s: mat for s, mat in m.R.items()}
    out = {}
    lower = _R_pow(m, k - 1)
    for s1, m1 in lower.items():
        for s2, m2 in m.R.items():
            s = s1 + s2
            acc = out.setdefault(s, [[Fraction(0)] * n for _ in range(n)])
            for i in range(n):
                for j in range(n):
                    acc[i][j] += sum(m1[i][x] * m2[x][j] for x in range(n))
    return {s: mat for s, mat in out.items() if any(any(row) for row in mat)}


def _Rr(m, h, k):
    """{s: sum_l [R^{k-1}]_l r_{s-l}} vectors."""
    n = m.n
    out = {}
    mats = _R_pow(m, k - 1) if k >= 2 else {0: [[Fraction(int(i == j))
                                                 for j in range(n)] for i in range(n)]}
    for l, mat in mats.items():
        for s2, rv in h.r_realized.items():
            if not any(rv):
                continue
            s = l + s2
            acc = out.setdefault(s, [Fraction(0)] * n)
            for i in range(n):
                acc[i] += sum(mat[i][x] * rv[x] for x in range(n))
    return {s: v for s, v in out.items() if any(v)}


def _rdagR(m, h, k):
    """{s: sum_l r^dag_{s-l} [R^{k-1}]_l} covectors."""
    n = m.n
    out = {}
    mats = _R_pow(m, k - 1) if k >= 2 else {0: [[Fraction(int(i == j))
                                                 for j in range(n)] for i in range(n)]}
    for l, mat in mats.items():
        for s2 in list(h.r_realized):
            rd = _r_dag(m, h, s2)
            if rd is None:
                continue
            s = l + s2
            acc = out.setdefault(s, [Fraction(0)] * n)
            for j in range(n):
                acc[j] += sum(rd[x] * mat[x][j] for x in range(n))
    return {s: v for s, v in out.items() if any(v)}


def _rdagRr(m, h, k):
    """{s: sum r^dag_p [R^{k-2}]_q r_t} scalars."""
    n = m.n
    out = {}
    mats = _R_pow(m, k - 2) if k >= 3 else {0: [[Fraction(int(i == j))
                                                 for j in range(n)] for i in range(n)]}
    for q, mat in mats.items():
        for sp in list(h.r_realized):
            rd = _r_dag(m, h, sp)
            if rd is None:
                continue
            for st, rv in h.r_realized.items():
                if not any(rv):
                    continue
                s = sp + q + st
                val = sum(rd[i] * mat[i][j] * rv[j] for i in range(n) for j in range(n))
                if val:
                    out[s] = out.get(s, Fraction(0)) + val
    return out


def explicit_operator(m, h, idx, wmin, wmax):
    """Closed-form tables for idx in {-1, 0, 1, 2} from the §-display sums."""
    n = m.n
    d = m.charge
    mu = m.mu
    cks = dict(m.c_consts)
    cks.update(h.c_realized)
    op = VirasoroOperator(idx, n, wmin, wmax)
    zr = range(wmin, wmax + 1)
    nn = range(0, wmax + 1)

    def cc(p):
        return Fraction(cks.get(p, 0))

    if idx == -1:
        for a in range(1, n + 1):
            for p in nn:
                op.add_b((a, p + 1), (a, p), Fraction(1))
        for p in zr:
            op.add_b((0, p + 1), (0, p), Fraction(1))
        for a in range(n):
            for b in range(n):
                op.add_c((a + 1, 0), (b + 1, 0), Fraction(m.eta[a][b], 2))
        return op

    if idx == 0:
        for a in range(n):
            for p in nn:
                op.add_b((a + 1, p), (a + 1, p), p + mu[a] + Fraction(1, 2))
        for p in zr:
            op.add_b((0, p), (0, p), p - d / 2 + Fraction(1, 2))
        for s, mat in m.R.items():
            for a in range(n):
                for e in range(n):
                    if mat[e][a]:
                        for p in nn:
                            op.add_b((a + 1, p), (e + 1, p - s), Fraction(mat[e][a]))
        for s, rv in h.r_realized.items():
            for e in range(n):
                if rv[e]:
                    for p in zr:
                        op.add_b((0, p), (e + 1, p - s), Fraction(rv[e]))
        for p in nn:
            for q in nn:
                mat = m.R.get(p + q + 1)
                if mat:
                    for a in range(n):
                        for b in range(n):
                            val = Fraction(_sign(p), 2) * sum(
                                m.eta[a][e] * mat[e][b] for e in range(n))
                            op.add_c((a + 1, p), (b + 1, q), val)
        for s in list(h.r_realized):
            rl = _r_low(m, h, s)
            if rl is None:
                continue
            for p in nn:
                for a in range(n):
                    if rl[a]:
                        op.add_c((0, s - 1 - p), (a + 1, p),
                                 Fraction(_sign(p + s + 1)) * rl[a])
        for p in zr:
            for q in zr:
                v = cc(p + q)
                if v:
                    op.add_C(p, q, Fraction(_sign(p), 2) * v)
        op.const = sum((Fraction(1, 4) - x * x for x in mu), Fraction(0)) / 4
        return op

    if idx == 1:
        for a in range(n):
            for b in range(n):
                if m.eta_inv[a][b]:
                    val = Fraction(1, 2) * (Fraction(1, 4) - mu[a] * mu[a]) \
                        * m.eta_inv[a][b]
                    op.add_a((a + 1, 0), (b + 1, 0), val)
        for a in range(n):
            for p in nn:
                op.add_b((a + 1, p), (a + 1, p + 1),
                         (p + mu[a] + Fraction(1, 2)) * (p + mu[a] + Fraction(3, 2)))
        for p in zr:
            op.add_b((0, p), (0, p + 1),
                     (p - d / 2 + Fraction(1, 2)) * (p - d / 2 + Fraction(3, 2)))
        for s, mat in m.R.items():
            for a in range(n):
                for e in range(n):
                    if mat[e][a]:
                        for p in nn:
                            op.add_b((a + 1, p), (e + 1, p + 1 - s),
                                     2 * mat[e][a] * (p + mu[a] + 1))
        for s, rv in h.r_realized.items():
            for e in range(n):
                if rv[e]:
                    for p in zr:
                        op.add_b((0, p), (e + 1, p + 1 - s),
                                 2 * rv[e] * (p - d / 2 + 1))
        for s, mat in _R_pow(m, 2).items():
            if s >= 2:
                for a in range(n):
                    for e in range(n):
                        if mat[e][a]:
                            for p in nn:
                                op.add_b((a + 1, p), (e + 1, p + 1 - s),
                                         Fraction(mat[e][a]))
        for s, vec in _Rr(m, h, 2).items():
            if s >= 2:
                for e in range(n):
                    if vec[e]:
                        for p in zr:
                            op.add_b((0, p), (e + 1, p + 1 - s), vec[e])
        for p in nn:
            for q in nn:
                mat = m.R.get(p + q + 2)
                if mat:
                    for a in range(n):
                        for b in range(n):
                            val = Fraction(_sign(q)) * (p + mu[a] + 1) * sum(
                                mat[e][a] * m.eta[e][b] for e in range(n))
                            op.add_c((a + 1, p), (b + 1, q), val)
                mat2 = _R_pow(m, 2).get(p + q + 2)
                if mat2:
                    for a in range(n):
                        for b in range(n):
                            val = Fraction(_sign(q), 2) * sum(
                                mat2[e][a] * m.eta[e][b] for e in range(n))
                            op.add_c((a + 1, p), (b + 1, q), val)
        for s, cov in _rdagR(m, h, 2).items():
            if s >= 2:
                for p in nn:
                    for a in range(n):
                        if cov[a]:
                            op.add_c((0, s - 2 - p), (a + 1, p),
                                     Fraction(_sign(p + s)) * cov[a])
        for s in list(h.r_realized):
            rl = _r_low(m, h, s)
            if rl is None:
                continue
            for p in nn:
                for a in range(n):
                    if rl[a]:
                        op.add_c((0, s - 2 - p), (a + 1, p),
                                 2 * Fraction(_sign(p + s)) * (p + mu[a] + 1) * rl[a])
        for s, val in _rdagRr(m, h, 2).items():
            if s >= 2:
                for p in zr:
                    op.add_C(s - 2 - p, p, Fraction(_sign(p), 2) * val)
        for p in zr:
            for q in zr:
                v = cc(p + q + 1)
                if v:
                    op.add_C(p, q, Fraction(_sign(p), 2) * v * (q - p))
        return op

    if idx == 2:
        R2 = _R_pow(m, 2)
        R3 = _R_pow(m, 3)
        Rr2 = _Rr(m, h, 2)
        Rr3 = _Rr(m, h, 3)
        rdR2 = _rdagR(m, h, 2)
        rdR3 = _rdagR(m, h, 3)
        rdRr2 = _rdagRr(m, h, 2)
        rdRr3 = _rdagRr(m, h, 3)
        mat1 = m.R.get(1)
        if mat1:
            for a in range(n):
                for lmb in range(n):
                    if mat1[a][lmb]:
                        for b in range(n):
                            if m.eta_inv[lmb][b]:
                                val = Fraction(1, 2) * (
                                    -3 * mu[a] * mu[a] + 3 * mu[a] + Fraction(1, 4)) \
                                    * mat1[a][lmb] * m.eta_inv[lmb][b]
                                op.add_a((a + 1, 0), (b + 1, 0), val)
        for a in range(n):
            for b in range(n):
                if m.eta_inv[a][b]:
                    val = (Fraction(1, 2) - mu[a]) * (Fraction(3, 2) - mu[a]) \
                        * m.eta_inv[a][b] * (Fraction(1, 2) - mu[b])
                    op.add_a((a + 1, 0), (b + 1, 1), val)
        for a in range(n):
            for p in nn:
                op.add_b((a + 1, p), (a + 1, p + 2),
                         (p + mu[a] + Fraction(1, 2)) * (p + mu[a] + Fraction(3, 2))
                         * (p + mu[a] + Fraction(5, 2)))
        for p in zr:
            op.add_b((0, p), (0, p + 2),
                     (p - d / 2 + Fraction(1, 2)) * (p - d / 2 + Fraction(3, 2))
                     * (p - d / 2 + Fraction(5, 2)))
        for s, mat in m.R.items():
            for a in range(n):
                for e in range(n):
                    if mat[e][a]:
                        for p in nn:
                            coef = 3 * (p + mu[a] + Fraction(3, 2)) ** 2 - 1
                            op.add_b((a + 1, p), (e + 1, p + 2 - s), coef * mat[e][a])
        for s, rv in h.r_realized.items():
            for e in range(n):
                if rv[e]:
                    for p in zr:
                        coef = 3 * (p - d / 2 + Fraction(3, 2)) ** 2 - 1
                        op.add_b((0, p), (e + 1, p + 2 - s), coef * rv[e])
        for s, mat in R2.items():
            if s >= 2:
                for a in range(n):
                    for e in range(n):
                        if mat[e][a]:
                            for p in nn:
                                op.add_b((a + 1, p), (e + 1, p + 2 - s),
                                         3 * (p + mu[a] + Fraction(3, 2)) * mat[e][a])
        for s, vec in Rr2.items():
            if s >= 2:
                for e in range(n):
                    if vec[e]:
                        for p in zr:
                            op.add_b((0, p), (e + 1, p + 2 - s),
                                     3 * (p - d / 2 + Fraction(3, 2)) * vec[e])
        for s, mat in R3.items():
            if s >= 3:
                for a in range(n):
                    for e in range(n):
                        if mat[e][a]:
                            for p in nn:
                                op.add_b((a + 1, p), (e + 1, p + 2 - s),
                                         Fraction(mat[e][a]))
        for s, vec in Rr3.items():
            if s >= 3:
                for e in range(n):
                    if vec[e]:
                        for p in zr:
                            op.add_b((0, p), (e + 1, p + 2 - s), vec[e])
        for p in nn:
            for q in nn:
                s = p + q + 3
                acc = [[Fraction(0)] * n for _ in range(n)]
                for e in range(n):
                    for a in range(n):
                        if s in R3:
                            acc[e][a] += R3[s][e][a]
                        if s in R2:
                            acc[e][a] += 3 * (p + mu[a] + Fraction(3, 2)) * R2[s][e][a]
                        if s in m.R:
                            acc[e][a] += (3 * (p + mu[a] + Fraction(3, 2)) ** 2 - 1) \
                                * m.R[s][e][a]
                for a in range(n):
                    for b in range(n):
                        val = Fraction(_sign(q), 2) * sum(
                            acc[e][a] * m.eta[e][b] for e in range(n))
                        op.add_c((a + 1, p), (b + 1, q), val)
        for s in set(h.r_realized) | set(rdR2) | set(rdR3):
            rl = _r_low(m, h, s)
            for p in nn:
                for a in range(n):
                    val = Fraction(0)
                    if rl and rl[a] and s >= 1:
                        val += (3 * (p + mu[a] + Fraction(3, 2)) ** 2 - 1) * rl[a]
                    if s >= 2 and s in rdR2 and rdR2[s][a]:
                        val += 3 * (p + mu[a] + Fraction(3, 2)) * rdR2[s][a]
                    if s >= 2 and s in rdR3 and rdR3[s][a]:
                        val += rdR3[s][a]
                    if val:
                        op.add_c((0, s - 3 - p), (a + 1, p),
                                 Fraction(_sign(s + p + 1)) * val)
        for p in zr:
            for q in zr:
                v = rdRr2.get(p + q + 3, Fraction(0))
                if v:
                    op.add_C(p, q, Fraction(3 * _sign(q), 4) * (p - q) * v)
                v = rdRr3.get(p + q + 3, Fraction(0))
                if v:
                    op.add_C(p, q, Fraction(_sign(p), 2) * v)
                v = cc(p + q + 2)
                if v:
                    coef = ((p + Fraction(1, 2) - d / 2) * (p + Fraction(3, 2) - d / 2)
                            + (q + Fraction(1, 2) - d / 2) * (q + Fraction(3, 2) - d / 2)
                            - (p + Fraction(1, 2) - d / 2) * (q + Fraction(1, 2) - d / 2))
                    op.add_C(p, q, Fraction(_sign(p), 2) * v * coef)
        return op

    raise ValueError("explicit tables exist for indices -1, 0, 1, 2 only")
