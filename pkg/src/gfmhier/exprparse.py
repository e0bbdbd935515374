"""Tiny expression parser for manifold spec files, goldens and the cache.

Grammar: ``+ - * / ^`` with parentheses, integer literals, and names that
resolve to generators or atoms of a Context.  The canonical text emitted by
``SymExpr.canonical()`` parses back to an equal expression.
"""

from __future__ import annotations

import re

from .symcore import Context, ContextError, SymExpr

_TOKEN = re.compile(r"\s*(\d+|[A-Za-z_][A-Za-z_0-9]*|\*\*|[()+\-*/^])")


class ParseError(Exception):
    pass


def _tokenize(s):
    out = []
    pos = 0
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if not m:
            if s[pos:].strip():
                raise ParseError(f"bad token at: {s[pos:pos + 20]!r}")
            break
        tok = m.group(1)
        out.append("^" if tok == "**" else tok)
        pos = m.end()
    return out


class _Parser:
    def __init__(self, ctx: Context, tokens):
        self.ctx = ctx
        self.toks = tokens
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self):
        t = self.peek()
        self.pos += 1
        return t

    def expect(self, t):
        got = self.take()
        if got != t:
            raise ParseError(f"expected {t!r}, got {got!r}")

    def parse_sum(self) -> SymExpr:
        sign = 1
        while self.peek() in ("+", "-"):
            if self.take() == "-":
                sign = -sign
        value = self.parse_product() * sign
        while self.peek() in ("+", "-"):
            sign = 1
            while self.peek() in ("+", "-"):
                if self.take() == "-":
                    sign = -sign
            value = value + self.parse_product() * sign
        return value

    def parse_product(self) -> SymExpr:
        value = self.parse_power()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.parse_power()
            value = value * rhs if op == "*" else value / rhs
        return value

    def parse_power(self) -> SymExpr:
        base = self.parse_atom()
        if self.peek() == "^":
            self.take()
            sign = 1
            while self.peek() in ("+", "-"):
                if self.take() == "-":
                    sign = -sign
            exp = self.take()
            if exp is None or not exp.isdigit():
                raise ParseError(f"bad exponent {exp!r}")
            return base ** (sign * int(exp))
        return base

    def parse_atom(self) -> SymExpr:
        t = self.take()
        if t == "(":
            v = self.parse_sum()
            self.expect(")")
            return v
        if t == "-":
            return -self.parse_atom()
        if t is None:
            raise ParseError("unexpected end of input")
        if t.isdigit():
            return self.ctx.const(int(t))
        if t in self.ctx.by_name:
            return self.ctx.var(t)
        if t in self.ctx.atom_by_name:
            return self.ctx.atom_by_name[t].poly
        base, _, order = t.rpartition("_")
        if order.isdigit() and base in self.ctx.by_name \
                and self.ctx.by_name[base].kind == "coordinate":
            return self.ctx.var(self.ctx.jet(base, int(order)))
        raise ContextError(f"unknown name {t!r} in expression")


def parse_expr(ctx: Context, text: str) -> SymExpr:
    p = _Parser(ctx, _tokenize(text))
    v = p.parse_sum()
    if p.peek() is not None:
        raise ParseError(f"trailing input at token {p.peek()!r}")
    return v
