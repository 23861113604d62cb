"""Recursive-descent parser for ``.habs`` sources.

Annotations live in ``/*@ ... @*/`` comments directly preceding the
declaration or statement they specify:

    requires <formula>                       creation condition / precondition
    invariant <formula>                      class invariant
    timed_requires <rational>                maximum time between two calls
    time_control: <x>.<m> = [a, b] (, ...)*  control taken over by this method
    time_bounds: [a, b]                      execution-time override (method)
    ctx_bounds: [a, b]                       execution-time override (call site)

``//`` comments run to end of line, ``/* ... */`` comments are skipped.
``a <= x <= b`` chains desugar to conjunctions. ``Fut<T> f = e.m(...)`` is
sugar for the asynchronous call ``e!m(...)``; ``duration(a, b)`` is accepted
and kept for the well-formedness check that demands ``a = b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from . import ast as A
from .counting import CountExpr


class ParseError(Exception):
    def __init__(self, message: str, span: A.SourceSpan, expected: frozenset[str] = frozenset()):
        super().__init__(f"{span}: {message}")
        self.message = message
        self.span = span
        self.expected = expected


class UnknownAnnotationKind(ParseError):
    pass


# ---------------------------------------------------------------------------
# Lexer

_KEYWORDS = {
    "class", "physical", "while", "if", "else", "await", "duration", "diff",
    "new", "get", "return", "skip", "true", "false", "null",
}

_TWO_CHAR = ("<=", ">=", "==", "!=", "&&", "||")
_ONE_CHAR = "(){}[]<>,;.?!=&|+-*/':"


@dataclass(frozen=True)
class Token:
    kind: str  # 'ident' | 'num' | 'op' | 'annotation' | 'eof'
    text: str
    span: A.SourceSpan


def tokenize(text: str, filename: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def span(l0, c0, l1, c1):
        return A.SourceSpan(filename, l0, c0, l1, c1)

    def advance(k: int):
        nonlocal i, line, col
        for _ in range(k):
            if i < n and text[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        c = text[i]
        if c in " \t\r\n":
            advance(1)
            continue
        l0, c0 = line, col
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                advance(1)
            continue
        if text.startswith("/*@", i):
            j = text.find("@*/", i + 3)
            if j < 0:
                raise ParseError("unterminated annotation comment", span(l0, c0, line, col))
            body = text[i + 3 : j]
            advance(j + 3 - i)
            tokens.append(Token("annotation", body.strip(), span(l0, c0, line, col)))
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise ParseError("unterminated comment", span(l0, c0, line, col))
            advance(j + 2 - i)
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            word = text[i:j]
            advance(j - i)
            tokens.append(Token("num", word, span(l0, c0, line, col)))
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] in "_$"):
                j += 1
            word = text[i:j]
            advance(j - i)
            tokens.append(Token("ident", word, span(l0, c0, line, col)))
            continue
        two = text[i : i + 2]
        if two in _TWO_CHAR:
            advance(2)
            tokens.append(Token("op", two, span(l0, c0, line, col)))
            continue
        if c in _ONE_CHAR:
            advance(1)
            tokens.append(Token("op", c, span(l0, c0, line, col)))
            continue
        raise ParseError(f"unexpected character {c!r}", span(l0, c0, line, col))
    tokens.append(Token("eof", "", span(line, col, line, col)))
    return tokens


# ---------------------------------------------------------------------------
# Annotations

ANNOTATION_KINDS = ("requires", "invariant", "timed_requires", "time_control", "time_bounds", "ctx_bounds")


@dataclass
class Annotation:
    kind: str
    formula: Optional[A.Expr] = None
    rational: Optional[Fraction] = None
    entries: Optional[list[A.TimeControlEntry]] = None
    bounds: Optional[tuple[CountExpr, CountExpr]] = None
    span: A.SourceSpan = A.NO_SPAN


def parse_annotation(text: str, filename: str = "<annotation>", ids: Optional[A.NodeIdAllocator] = None,
                     span: A.SourceSpan = A.NO_SPAN) -> Annotation:
    """Parse the text between ``/*@`` and ``@*/`` into one annotation."""
    ids = ids or A.NodeIdAllocator()
    toks = tokenize(text, filename)
    p = _Parser(toks, filename, ids)
    head = p.peek()
    if head.kind != "ident" or head.text not in ANNOTATION_KINDS:
        raise UnknownAnnotationKind(f"unknown annotation kind {head.text!r}", span if span != A.NO_SPAN else head.span)
    p.next()
    if p.peek().text == ":":
        p.next()
    kind = head.text
    ann = Annotation(kind, span=span)
    if kind in ("requires", "invariant"):
        ann.formula = p.parse_expr()
    elif kind == "timed_requires":
        ann.rational = p.parse_signed_rational()
    elif kind in ("time_bounds", "ctx_bounds"):
        ann.bounds = p.parse_bounds()
    elif kind == "time_control":
        entries = []
        while True:
            loc = p.expect_ident()
            p.expect_op(".")
            meth = p.expect_ident()
            p.expect_op("=")
            lo, hi = p.parse_bounds()
            entries.append(A.TimeControlEntry(loc, meth, lo, hi))
            if p.peek().text == ",":
                p.next()
                continue
            break
        ann.entries = entries
    if p.peek().kind != "eof":
        raise ParseError(f"trailing input in annotation: {p.peek().text!r}", p.peek().span)
    return ann


# ---------------------------------------------------------------------------
# Parser

class _Parser:
    def __init__(self, tokens: list[Token], filename: str, ids: A.NodeIdAllocator):
        self.toks = tokens
        self.pos = 0
        self.filename = filename
        self.ids = ids

    # token plumbing ----------------------------------------------------

    def peek(self, k: int = 0) -> Token:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def at(self, text: str) -> bool:
        return self.peek().text == text and self.peek().kind in ("op", "ident")

    def expect_op(self, text: str) -> Token:
        t = self.peek()
        if t.kind != "op" or t.text != text:
            raise ParseError(f"expected {text!r}, found {t.text!r}", t.span, frozenset({text}))
        return self.next()

    def expect_ident(self, word: Optional[str] = None) -> str:
        t = self.peek()
        if t.kind != "ident" or (word is not None and t.text != word):
            raise ParseError(f"expected {'identifier' if word is None else word!r}, found {t.text!r}", t.span,
                             frozenset({word or "<ident>"}))
        return self.next().text

    def _clone(self, node: A.Node) -> A.Node:
        import copy

        dup = copy.deepcopy(node)
        for n in A.iter_nodes(dup):
            n.node_id = self.ids.node()
        return dup

    def _mk(self, node: A.Node, start: Token) -> A.Node:
        node.node_id = self.ids.node()
        end = self.toks[max(self.pos - 1, 0)]
        node.span = A.SourceSpan(self.filename, start.span.start_line, start.span.start_col,
                                 end.span.end_line, end.span.end_col)
        return node

    # rationals and bounds ----------------------------------------------

    def parse_signed_rational(self) -> Fraction:
        neg = False
        if self.at("-"):
            self.next()
            neg = True
        t = self.peek()
        if t.kind != "num":
            raise ParseError(f"expected number, found {t.text!r}", t.span)
        self.next()
        value = Fraction(t.text)
        if self.at("/"):
            self.next()
            d = self.peek()
            if d.kind != "num":
                raise ParseError(f"expected denominator, found {d.text!r}", d.span)
            self.next()
            value = value / Fraction(d.text)
        return -value if neg else value

    def parse_count(self) -> CountExpr:
        if self.peek().kind == "ident" and self.peek().text == "inf":
            self.next()
            return CountExpr.from_text("inf")
        if self.at("-") and self.peek(1).kind == "ident" and self.peek(1).text == "inf":
            self.next()
            self.next()
            return CountExpr.from_text("-inf")
        return CountExpr.of(self.parse_signed_rational())

    def parse_bounds(self) -> tuple[CountExpr, CountExpr]:
        self.expect_op("[")
        lo = self.parse_count()
        self.expect_op(",")
        hi = self.parse_count()
        self.expect_op("]")
        return lo, hi

    # expressions ---------------------------------------------------------

    def parse_expr(self) -> A.Expr:
        return self._parse_or()

    def _parse_or(self) -> A.Expr:
        start = self.peek()
        left = self._parse_and()
        while self.peek().text in ("|", "||"):
            self.next()
            right = self._parse_and()
            left = self._mk(A.Binary(op="|", left=left, right=right), start)
        return left

    def _parse_and(self) -> A.Expr:
        start = self.peek()
        left = self._parse_cmp()
        while self.peek().text in ("&", "&&"):
            self.next()
            right = self._parse_cmp()
            left = self._mk(A.Binary(op="&", left=left, right=right), start)
        return left

    def _parse_cmp(self) -> A.Expr:
        start = self.peek()
        first = self._parse_add()
        ops: list[str] = []
        operands = [first]
        while self.peek().text in ("<=", ">=", "==", "!="):
            ops.append(self.next().text)
            operands.append(self._parse_add())
        if not ops:
            return first
        comparisons = []
        for i, op in enumerate(ops):
            left = operands[i] if i == 0 else self._clone(operands[i])
            comparisons.append(self._mk(A.Binary(op=op, left=left, right=operands[i + 1]), start))
        result = comparisons[0]
        for c in comparisons[1:]:
            result = self._mk(A.Binary(op="&", left=result, right=c), start)
        return result

    def _parse_add(self) -> A.Expr:
        start = self.peek()
        left = self._parse_mul()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            right = self._parse_mul()
            left = self._mk(A.Binary(op=op, left=left, right=right), start)
        return left

    def _parse_mul(self) -> A.Expr:
        start = self.peek()
        left = self._parse_unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            right = self._parse_unary()
            left = self._mk(A.Binary(op=op, left=left, right=right), start)
        return left

    def _parse_unary(self) -> A.Expr:
        t = self.peek()
        if t.text == "!":
            self.next()
            inner = self._parse_unary()
            return self._mk(A.Unary(op="!", operand=inner), t)
        if t.text == "-":
            self.next()
            inner = self._parse_unary()
            if isinstance(inner, A.Num):
                inner.value = -inner.value
                return inner
            return self._mk(A.Unary(op="-", operand=inner), t)
        return self._parse_primary()

    def _parse_primary(self) -> A.Expr:
        t = self.peek()
        if t.kind == "num":
            self.next()
            return self._mk(A.Num(value=Fraction(t.text)), t)
        if t.kind == "ident":
            if t.text == "true":
                self.next()
                return self._mk(A.BoolLit(value=True), t)
            if t.text == "false":
                self.next()
                return self._mk(A.BoolLit(value=False), t)
            if t.text == "null":
                self.next()
                return self._mk(A.NullLit(), t)
            if t.text in _KEYWORDS and t.text not in ("true", "false", "null"):
                raise ParseError(f"unexpected keyword {t.text!r} in expression", t.span)
            self.next()
            return self._mk(A.Var(name=t.text), t)
        if t.text == "(":
            self.next()
            e = self.parse_expr()
            self.expect_op(")")
            return e
        raise ParseError(f"expected expression, found {t.text!r}", t.span)

    # types ----------------------------------------------------------------

    def _looks_like_type(self) -> bool:
        t = self.peek()
        if t.kind != "ident" or t.text in _KEYWORDS:
            return False
        nxt = self.peek(1)
        if nxt.text == "<":
            return True
        return nxt.kind == "ident" and nxt.text not in _KEYWORDS

    def parse_type(self) -> A.Type:
        name = self.expect_ident()
        if self.at("<"):
            self.next()
            arg = self.parse_type()
            self.expect_op(">")
            return A.Type(name, arg)
        return A.Type(name)

    # guards / rhs -----------------------------------------------------------

    def parse_guard(self) -> A.Guard:
        t = self.peek()
        if t.kind == "ident" and t.text == "duration":
            self.next()
            self.expect_op("(")
            e = self.parse_expr()
            self.expect_op(")")
            return self._mk(A.DurationGuard(expr=e), t)
        if t.kind == "ident" and t.text == "diff":
            self.next()
            e = self.parse_expr()
            return self._mk(A.DiffGuard(expr=e), t)
        e = self.parse_expr()
        self.expect_op("?")
        return self._mk(A.FutureGuard(expr=e), t)

    def _parse_args(self) -> list[A.Expr]:
        self.expect_op("(")
        args: list[A.Expr] = []
        if not self.at(")"):
            args.append(self.parse_expr())
            while self.at(","):
                self.next()
                args.append(self.parse_expr())
        self.expect_op(")")
        return args

    def parse_rhs(self) -> A.Rhs:
        t = self.peek()
        if t.kind == "ident" and t.text == "new":
            self.next()
            cls = self.expect_ident()
            args = self._parse_args()
            return self._mk(A.NewRhs(class_name=cls, args=args), t)
        e = self.parse_expr()
        if self.at("!") and self.peek(1).kind == "ident" and self.peek(2).text == "(":
            self.next()
            meth = self.expect_ident()
            args = self._parse_args()
            return self._mk(A.CallRhs(callee=e, method=meth, args=args), t)
        if self.at(".") and self.peek(1).text == "get":
            self.next()
            self.next()
            return self._mk(A.GetRhs(expr=e), t)
        if self.at(".") and self.peek(1).kind == "ident" and self.peek(2).text == "(":
            # dot call: sugar for the asynchronous form
            self.next()
            meth = self.expect_ident()
            args = self._parse_args()
            return self._mk(A.CallRhs(callee=e, method=meth, args=args), t)
        return self._mk(A.ExprRhs(expr=e), t)

    # statements ---------------------------------------------------------------

    def _pending_stmt_annotations(self) -> tuple[Optional[tuple[CountExpr, CountExpr]], Optional[A.Expr], Optional[A.Expr]]:
        """Collect ctx_bounds / [Cost: e] / [DC: e] prefixes, in any order."""
        ctx_bounds = None
        cost = None
        dc = None
        while True:
            t = self.peek()
            if t.kind == "annotation":
                ann = parse_annotation(t.text, self.filename, self.ids, t.span)
                if ann.kind != "ctx_bounds":
                    raise ParseError(f"annotation {ann.kind!r} is not valid on a statement", t.span)
                ctx_bounds = ann.bounds
                self.next()
                continue
            if t.text == "[" and self.peek(1).kind == "ident" and self.peek(1).text in ("Cost", "DC"):
                self.next()
                label = self.expect_ident()
                self.expect_op(":")
                e = self.parse_expr()
                self.expect_op("]")
                if label == "Cost":
                    cost = e
                else:
                    dc = e
                continue
            return ctx_bounds, cost, dc

    def parse_stmt(self) -> A.Stmt:
        ctx_bounds, cost, dc = self._pending_stmt_annotations()
        stmt = self._parse_bare_stmt()
        stmt.ctx_bounds = ctx_bounds
        stmt.cost = cost
        if dc is not None:
            if not (isinstance(stmt, A.Assign) and isinstance(stmt.rhs, A.NewRhs)):
                raise ParseError("[DC: ...] is only valid on an object creation", stmt.span)
            stmt.dc = dc
        return stmt

    def _parse_block_or_stmt(self) -> A.Block:
        t = self.peek()
        if t.text == "{":
            return self.parse_block()
        stmt = self.parse_stmt()
        blk = A.Block(stmts=[stmt])
        blk.node_id = self.ids.node()
        blk.span = stmt.span
        return blk

    def parse_block(self) -> A.Block:
        start = self.peek()
        self.expect_op("{")
        stmts: list[A.Stmt] = []
        while not self.at("}"):
            stmts.append(self.parse_stmt())
        self.expect_op("}")
        return self._mk(A.Block(stmts=stmts), start)

    def _parse_bare_stmt(self) -> A.Stmt:
        t = self.peek()
        if t.kind == "ident":
            if t.text == "while":
                self.next()
                self.expect_op("(")
                cond = self.parse_expr()
                self.expect_op(")")
                body = self._parse_block_or_stmt()
                return self._mk(A.While(cond=cond, body=body), t)
            if t.text == "if":
                self.next()
                self.expect_op("(")
                cond = self.parse_expr()
                self.expect_op(")")
                then = self._parse_block_or_stmt()
                els = None
                if self.peek().kind == "ident" and self.peek().text == "else":
                    self.next()
                    els = self._parse_block_or_stmt()
                return self._mk(A.If(cond=cond, then=then, els=els), t)
            if t.text == "await":
                self.next()
                guard = self.parse_guard()
                self.expect_op(";")
                node = A.Await(guard=guard, suspension_point=self.ids.suspension_point())
                return self._mk(node, t)
            if t.text == "duration":
                self.next()
                self.expect_op("(")
                lo = self.parse_expr()
                hi = None
                if self.at(","):
                    self.next()
                    hi = self.parse_expr()
                self.expect_op(")")
                self.expect_op(";")
                return self._mk(A.DurationStmt(low=lo, high=hi), t)
            if t.text == "skip":
                self.next()
                self.expect_op(";")
                return self._mk(A.Skip(), t)
            if t.text == "return":
                self.next()
                e = None
                if not self.at(";"):
                    e = self.parse_expr()
                self.expect_op(";")
                return self._mk(A.Return(expr=e), t)
        # assignment or bare rhs
        decl_type = None
        target = None
        if self._looks_like_type() and self.peek(2).text == "=" or (
            self.peek().text == "Fut" or (self._looks_like_type() and self.peek(1).text == "<")
        ):
            decl_type = self.parse_type()
            target = self.expect_ident()
            self.expect_op("=")
        elif self.peek().kind == "ident" and self.peek().text not in _KEYWORDS and self.peek(1).text == "=" \
                and self.peek(2).text != "=":
            target = self.expect_ident()
            self.expect_op("=")
        rhs = self.parse_rhs()
        self.expect_op(";")
        return self._mk(A.Assign(decl_type=decl_type, target=target, rhs=rhs), t)

    # declarations -----------------------------------------------------------

    def _parse_param_list(self) -> list[tuple[A.Type, str]]:
        self.expect_op("(")
        params: list[tuple[A.Type, str]] = []
        if not self.at(")"):
            while True:
                ty = self.parse_type()
                name = self.expect_ident()
                params.append((ty, name))
                if self.at(","):
                    self.next()
                    continue
                break
        self.expect_op(")")
        return params

    def _collect_annotations(self) -> list[Annotation]:
        anns = []
        while self.peek().kind == "annotation":
            t = self.next()
            anns.append(parse_annotation(t.text, self.filename, self.ids, t.span))
        return anns

    def parse_class(self, anns: list[Annotation]) -> A.ClassDecl:
        start = self.peek()
        self.expect_ident("class")
        name = self.expect_ident()
        ctor_params: list[tuple[A.Type, str]] = []
        if self.at("("):
            ctor_params = self._parse_param_list()
        self.expect_op("{")
        fields: list[A.FieldDecl] = []
        physical_block: Optional[list[A.OdeDecl]] = None
        init_block: Optional[A.Block] = None
        methods: list[A.MethodDecl] = []
        while not self.at("}"):
            member_anns = self._collect_annotations()
            t = self.peek()
            if t.text == "{":
                if init_block is not None:
                    raise ParseError("duplicate init block", t.span)
                init_block = self.parse_block()
                continue
            if t.kind == "ident" and t.text == "physical":
                if self.peek(1).text == "{":
                    self.next()
                    physical_block = self._parse_physical_block()
                    continue
                self.next()
                fields.append(self._parse_field(physical=True))
                continue
            # field or method: Type name then '=' or ';' -> field, '(' -> method
            ty = self.parse_type()
            member_name = self.expect_ident()
            if self.at("("):
                methods.append(self._parse_method_rest(ty, member_name, member_anns, t))
                continue
            init = None
            if self.at("="):
                self.next()
                init = self.parse_expr()
            self.expect_op(";")
            fd = A.FieldDecl(type=ty, name=member_name, init=init, physical=False)
            fields.append(self._mk(fd, t))
        self.expect_op("}")
        cd = A.ClassDecl(
            name=name, ctor_params=ctor_params, fields=fields,
            physical_block=physical_block, init_block=init_block, methods=methods,
        )
        for ann in anns:
            if ann.kind == "requires":
                cd.creation_condition = ann.formula
            elif ann.kind == "invariant":
                cd.invariant = ann.formula
            else:
                raise ParseError(f"annotation {ann.kind!r} is not valid on a class", ann.span)
        return self._mk(cd, start)

    def _parse_field(self, physical: bool) -> A.FieldDecl:
        start = self.peek()
        ty = self.parse_type()
        name = self.expect_ident()
        init = None
        if self.at("="):
            self.next()
            init = self.parse_expr()
        self.expect_op(";")
        return self._mk(A.FieldDecl(type=ty, name=name, init=init, physical=physical), start)

    def _parse_physical_block(self) -> list[A.OdeDecl]:
        self.expect_op("{")
        odes: list[A.OdeDecl] = []
        while not self.at("}"):
            start = self.peek()
            name = self.expect_ident()
            self.expect_op("'")
            self.expect_op("=")
            rhs = self.parse_expr()
            self.expect_op(";")
            odes.append(self._mk(A.OdeDecl(field_name=name, rhs=rhs), start))
        self.expect_op("}")
        return odes

    def _parse_method_rest(self, return_type: A.Type, name: str, anns: list[Annotation], start: Token) -> A.MethodDecl:
        self.pos -= 0  # params follow
        params: list[tuple[A.Type, str]] = self._parse_param_list()
        self.expect_op("{")
        stmts: list[A.Stmt] = []
        ret: Optional[A.Expr] = None
        while not self.at("}"):
            stmt = self.parse_stmt()
            if isinstance(stmt, A.Return):
                if not self.at("}"):
                    raise ParseError("return must be the last statement of a method", stmt.span)
                ret = stmt.expr
                break
            stmts.append(stmt)
        self.expect_op("}")
        body = A.Block(stmts=stmts)
        body.node_id = self.ids.node()
        body.span = start.span
        m = A.MethodDecl(return_type=return_type, name=name, params=params, body=body, ret=ret)
        for ann in anns:
            if ann.kind == "requires":
                m.precondition = ann.formula
            elif ann.kind == "timed_requires":
                m.timed_requires = ann.rational
            elif ann.kind == "time_control":
                m.time_control = ann.entries or []
            elif ann.kind == "time_bounds":
                m.time_bounds = ann.bounds
            else:
                raise ParseError(f"annotation {ann.kind!r} is not valid on a method", ann.span)
        return self._mk(m, start)

    def parse_program(self) -> A.Program:
        start = self.peek()
        classes: list[A.ClassDecl] = []
        main: Optional[A.Block] = None
        while self.peek().kind != "eof":
            anns = self._collect_annotations()
            t = self.peek()
            if t.kind == "ident" and t.text == "class":
                classes.append(self.parse_class(anns))
                continue
            if t.text == "{":
                if anns:
                    raise ParseError("annotations are not valid on the main block", anns[0].span)
                main = self.parse_block()
                break
            raise ParseError(f"expected class declaration or main block, found {t.text!r}", t.span)
        if main is None:
            raise ParseError("missing main block", self.peek().span)
        if self.peek().kind != "eof":
            raise ParseError(f"trailing input after main block: {self.peek().text!r}", self.peek().span)
        return self._mk(A.Program(classes=classes, main=main), start)


def parse_program(text: str, filename: str = "<input>") -> A.Program:
    """Parse source text into a program AST with source positions."""
    ids = A.NodeIdAllocator()
    tokens = tokenize(text, filename)
    return _Parser(tokens, filename, ids).parse_program()
