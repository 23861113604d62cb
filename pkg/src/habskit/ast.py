"""Abstract syntax for the hybrid active-object modeling language.

A program is a set of classes plus a main block. Classes own discrete and
physical (ODE-driven) fields, an optional init block, and methods whose
statements may suspend on guards, advance time, create objects and call
methods asynchronously. Specification annotations (invariants, creation
conditions, call-frequency requirements and control transfers) are attached
to the declarations they precede in the source.

Every node carries a program-wide unique ``node_id`` and a ``SourceSpan``;
every ``await`` additionally carries a unique suspension-point id.
All nodes are plain mutable dataclasses but are treated as immutable once a
program has been assembled; transformation passes rebuild nodes instead of
editing them in place.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields as dc_fields
from fractions import Fraction
from typing import Iterator, Optional

from .counting import CountExpr


# ---------------------------------------------------------------------------
# Source positions and diagnostics


@dataclass(frozen=True)
class SourceSpan:
    file: str
    start_line: int
    start_col: int
    end_line: int
    end_col: int

    def __str__(self) -> str:
        return f"{self.file}:{self.start_line}:{self.start_col}"


NO_SPAN = SourceSpan("<none>", 0, 0, 0, 0)


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    span: SourceSpan = NO_SPAN
    node_id: int = -1

    def __str__(self) -> str:
        return f"{self.span}: {self.kind}: {self.message}"


class NodeIdAllocator:
    """Hands out program-wide unique node and suspension-point ids."""

    def __init__(self, start: int = 0, sp_start: int = 0) -> None:
        self._nodes = itertools.count(start)
        self._sps = itertools.count(sp_start)

    def node(self) -> int:
        return next(self._nodes)

    def suspension_point(self) -> int:
        return next(self._sps)

    @staticmethod
    def continuing(program: "Program") -> "NodeIdAllocator":
        max_node = max((n.node_id for n in iter_nodes(program)), default=-1)
        max_sp = max(
            (n.suspension_point for n in iter_nodes(program) if isinstance(n, Await)),
            default=-1,
        )
        return NodeIdAllocator(max_node + 1, max_sp + 1)


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Type:
    name: str
    arg: Optional["Type"] = None

    def __str__(self) -> str:
        if self.arg is not None:
            return f"{self.name}<{self.arg}>"
        return self.name

    @property
    def is_future(self) -> bool:
        return self.name == "Fut"


REAL = Type("Real")
INT = Type("Int")
BOOL = Type("Bool")
UNIT = Type("Unit")

NUMERIC_TYPE_NAMES = {"Real", "Int", "Rat"}
BUILTIN_TYPE_NAMES = NUMERIC_TYPE_NAMES | {"Bool", "Unit", "Fut", "DC", "DeploymentComponent"}

#: class names with built-in runtime behavior (resource pools)
DC_CLASS_NAMES = {"DeploymentComponent"}


def is_numeric(t: Optional[Type]) -> bool:
    return t is not None and t.name in NUMERIC_TYPE_NAMES


def is_class_type(t: Optional[Type], program: "Program") -> bool:
    return t is not None and program.find_class(t.name) is not None


# ---------------------------------------------------------------------------
# Expressions


@dataclass
class Node:
    node_id: int = field(default=-1, kw_only=True)
    span: SourceSpan = field(default=NO_SPAN, kw_only=True)


@dataclass
class Expr(Node):
    pass


@dataclass
class Num(Expr):
    value: Fraction = Fraction(0)


@dataclass
class BoolLit(Expr):
    value: bool = False


@dataclass
class NullLit(Expr):
    pass


@dataclass
class Var(Expr):
    """A field, local or parameter reference; resolution is contextual."""

    name: str = ""


@dataclass
class Unary(Expr):
    op: str = "!"
    operand: Expr = None  # type: ignore[assignment]


@dataclass
class Binary(Expr):
    op: str = "+"
    left: Expr = None  # type: ignore[assignment]
    right: Expr = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# Guards and right-hand sides


@dataclass
class Guard(Node):
    pass


@dataclass
class FutureGuard(Guard):
    expr: Expr = None  # type: ignore[assignment]


@dataclass
class DurationGuard(Guard):
    expr: Expr = None  # type: ignore[assignment]


@dataclass
class DiffGuard(Guard):
    expr: Expr = None  # type: ignore[assignment]


@dataclass
class Rhs(Node):
    pass


@dataclass
class ExprRhs(Rhs):
    expr: Expr = None  # type: ignore[assignment]


@dataclass
class NewRhs(Rhs):
    class_name: str = ""
    args: list[Expr] = field(default_factory=list)


@dataclass
class GetRhs(Rhs):
    expr: Expr = None  # type: ignore[assignment]


@dataclass
class CallRhs(Rhs):
    callee: Expr = None  # type: ignore[assignment]
    method: str = ""
    args: list[Expr] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Statements


@dataclass
class Stmt(Node):
    #: resource units consumed when the statement executes ([Cost: e])
    cost: Optional[Expr] = field(default=None, kw_only=True)
    #: execution-time override for a call made by this statement
    ctx_bounds: Optional[tuple[CountExpr, CountExpr]] = field(default=None, kw_only=True)


@dataclass
class Block(Stmt):
    stmts: list[Stmt] = field(default_factory=list)


@dataclass
class While(Stmt):
    cond: Expr = None  # type: ignore[assignment]
    body: Block = None  # type: ignore[assignment]


@dataclass
class If(Stmt):
    cond: Expr = None  # type: ignore[assignment]
    then: Block = None  # type: ignore[assignment]
    els: Optional[Block] = None


@dataclass
class Await(Stmt):
    guard: Guard = None  # type: ignore[assignment]
    suspension_point: int = -1


@dataclass
class Assign(Stmt):
    """``[T] x = rhs`` or a bare ``rhs`` statement (target is None).

    Targets are restricted to identifiers (variables or fields).
    """

    decl_type: Optional[Type] = None
    target: Optional[str] = None
    rhs: Rhs = None  # type: ignore[assignment]
    #: deployment component placement for object creations ([DC: e])
    dc: Optional[Expr] = field(default=None, kw_only=True)


@dataclass
class DurationStmt(Stmt):
    low: Expr = None  # type: ignore[assignment]
    high: Optional[Expr] = None  # two-argument form; must equal `low`


@dataclass
class Skip(Stmt):
    pass


@dataclass
class Return(Stmt):
    expr: Optional[Expr] = None


# ---------------------------------------------------------------------------
# Declarations


@dataclass
class FieldDecl(Node):
    type: Type = None  # type: ignore[assignment]
    name: str = ""
    init: Optional[Expr] = None
    physical: bool = False


@dataclass
class OdeDecl(Node):
    """``f' = e`` in the physical block."""

    field_name: str = ""
    rhs: Expr = None  # type: ignore[assignment]


@dataclass
class TimeControlEntry:
    """One ``x.m = [start, end]`` item of a time_control annotation.

    ``start`` bounds the time from method entry to the first call of the
    controlled method; ``end`` is the budget that must remain when the
    method returns.
    """

    location: str
    method: str
    start: CountExpr
    end: CountExpr


@dataclass
class MethodDecl(Node):
    return_type: Type = None  # type: ignore[assignment]
    name: str = ""
    params: list[tuple[Type, str]] = field(default_factory=list)
    body: Block = None  # type: ignore[assignment]
    ret: Optional[Expr] = None
    timed_requires: Optional[Fraction] = None
    time_control: list[TimeControlEntry] = field(default_factory=list)
    precondition: Optional[Expr] = None
    postcondition: Optional[Expr] = None
    time_bounds: Optional[tuple[CountExpr, CountExpr]] = None

    def param_names(self) -> list[str]:
        return [n for _, n in self.params]


@dataclass
class ClassDecl(Node):
    name: str = ""
    ctor_params: list[tuple[Type, str]] = field(default_factory=list)
    fields: list[FieldDecl] = field(default_factory=list)
    physical_block: Optional[list[OdeDecl]] = None
    init_block: Optional[Block] = None
    methods: list[MethodDecl] = field(default_factory=list)
    invariant: Optional[Expr] = None
    creation_condition: Optional[Expr] = None

    def find_method(self, name: str) -> Optional[MethodDecl]:
        for m in self.methods:
            if m.name == name:
                return m
        return None

    def all_field_decls(self) -> list[FieldDecl]:
        """Constructor parameters first (they are fields), then declared fields."""
        ctor = [
            FieldDecl(type=t, name=n, init=None, physical=False)
            for t, n in self.ctor_params
        ]
        return ctor + list(self.fields)

    def physical_field_names(self) -> list[str]:
        return [f.name for f in self.fields if f.physical]


@dataclass
class Program(Node):
    classes: list[ClassDecl] = field(default_factory=list)
    main: Block = None  # type: ignore[assignment]

    def find_class(self, name: str) -> Optional[ClassDecl]:
        for c in self.classes:
            if c.name == name:
                return c
        return None

    def methods_with_required_period(self, class_name: str) -> list[MethodDecl]:
        cd = self.find_class(class_name)
        if cd is None:
            return []
        return [m for m in cd.methods if m.timed_requires is not None]


# ---------------------------------------------------------------------------
# Controlled-entity identifiers


@dataclass(frozen=True)
class Ceid:
    """A (location, method) pair naming a periodically controlled method."""

    location: str
    method: str

    def __str__(self) -> str:
        return f"{self.location}.{self.method}"


# ---------------------------------------------------------------------------
# Traversal and structural equality


def iter_nodes(node) -> Iterator[Node]:
    """Depth-first traversal over every AST node reachable from `node`."""
    if isinstance(node, Node):
        yield node
    if isinstance(node, (list, tuple)):
        for item in node:
            yield from iter_nodes(item)
        return
    if not isinstance(node, Node):
        return
    for f in dc_fields(node):
        if f.name in ("node_id", "span"):
            continue
        yield from iter_nodes(getattr(node, f.name))


_IGNORED_IN_EQ = {"node_id", "span", "suspension_point"}


def structurally_equal(a, b) -> bool:
    """Equality up to node ids, spans and suspension-point numbering."""
    if type(a) is not type(b):
        return False
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(
            structurally_equal(x, y) for x, y in zip(a, b)
        )
    if isinstance(a, Node):
        for f in dc_fields(a):
            if f.name in _IGNORED_IN_EQ:
                continue
            if not structurally_equal(getattr(a, f.name), getattr(b, f.name)):
                return False
        return True
    if isinstance(a, TimeControlEntry):
        return (a.location, a.method, a.start, a.end) == (
            b.location,
            b.method,
            b.start,
            b.end,
        )
    return a == b


# ---------------------------------------------------------------------------
# Structural well-formedness


def _scope_types(program: Program, cd: Optional[ClassDecl], method: Optional[MethodDecl]) -> dict[str, Type]:
    env: dict[str, Type] = {}
    if cd is not None:
        for fd in cd.all_field_decls():
            env[fd.name] = fd.type
        env["this"] = Type(cd.name)
    if method is not None:
        for t, n in method.params:
            env[n] = t
    return env


def _collect_local_types(block: Block, env: dict[str, Type]) -> None:
    for node in iter_nodes(block):
        if isinstance(node, Assign) and node.decl_type is not None and node.target:
            env.setdefault(node.target, node.decl_type)


def _controlled_class_names(program: Program) -> set[str]:
    return {
        c.name
        for c in program.classes
        if any(m.timed_requires is not None for m in c.methods)
    }


def validate_wellformed(program: Program) -> list[Diagnostic]:
    """Collect all structural violations; an empty list means well-formed."""
    out: list[Diagnostic] = []
    controlled = _controlled_class_names(program)

    seen_classes: set[str] = set()
    for cd in program.classes:
        if cd.name in seen_classes:
            out.append(Diagnostic("DuplicateClass", f"class {cd.name} declared twice", cd.span, cd.node_id))
        seen_classes.add(cd.name)

        seen_methods: set[str] = set()
        for m in cd.methods:
            if m.name in seen_methods:
                out.append(Diagnostic("DuplicateMethod", f"method {cd.name}.{m.name} declared twice", m.span, m.node_id))
            seen_methods.add(m.name)

        physical_fields = [f for f in cd.fields if f.physical]
        for f in physical_fields:
            if f.type.name not in NUMERIC_TYPE_NAMES:
                out.append(Diagnostic("PhysicalFieldNotReal", f"physical field {f.name} must be Real-typed", f.span, f.node_id))
            if f.init is None:
                out.append(Diagnostic("PhysicalFieldUninitialized", f"physical field {f.name} lacks an initializer", f.span, f.node_id))
        if physical_fields and cd.physical_block is None:
            out.append(Diagnostic("MissingPhysicalBlock", f"class {cd.name} has physical fields but no physical block", cd.span, cd.node_id))
        if cd.physical_block is not None:
            ode_targets = [o.field_name for o in cd.physical_block]
            for name in ode_targets:
                if name not in {f.name for f in physical_fields}:
                    out.append(Diagnostic("OdeForNonPhysicalField", f"ODE given for non-physical field {name}", cd.span, cd.node_id))
            for f in physical_fields:
                n = ode_targets.count(f.name)
                if n != 1:
                    out.append(Diagnostic("OdeCountMismatch", f"physical field {f.name} needs exactly one ODE, found {n}", f.span, f.node_id))

        # controlled-class values may not live in fields
        for f in cd.all_field_decls():
            if f.type.name in controlled:
                out.append(Diagnostic("ControlledValueInField", f"field {f.name} stores a value of controlled class {f.type.name}; only locals and parameters may hold controlled objects", f.span, f.node_id))

        for m in cd.methods:
            _validate_method(program, cd, m, controlled, out)
        if cd.init_block is not None:
            _validate_block(program, cd, None, cd.init_block, controlled, out)

    _validate_block(program, None, None, program.main, controlled, out)
    _validate_unique_ids(program, out)
    return out


def _validate_method(program, cd, m, controlled, out):
    if m.timed_requires is not None and m.timed_requires < 0:
        out.append(Diagnostic("NegativeFrequency", f"timed_requires of {cd.name}.{m.name} must be nonnegative", m.span, m.node_id))
    param_types = dict((n, t) for t, n in m.params)
    for entry in m.time_control:
        from .counting import is_positive
        if not (is_positive(entry.start) and is_positive(entry.end)):
            out.append(Diagnostic("NegativeControlOffset", f"time_control offsets for {entry.location}.{entry.method} must be nonnegative", m.span, m.node_id))
        t = param_types.get(entry.location)
        if t is None:
            out.append(Diagnostic("UnknownControlLocation", f"time_control names {entry.location}, which is not a parameter of {cd.name}.{m.name}", m.span, m.node_id))
            continue
        target = program.find_class(t.name)
        if target is None or target.find_method(entry.method) is None:
            out.append(Diagnostic("UnknownControlMethod", f"time_control names {entry.location}.{entry.method}, but {t.name} has no such method", m.span, m.node_id))
    _validate_block(program, cd, m, m.body, controlled, out)


def _validate_block(program, cd, method, block, controlled, out):
    env = _scope_types(program, cd, method)
    _collect_local_types(block, env)
    for node in iter_nodes(block):
        if isinstance(node, DiffGuard):
            for sub in iter_nodes(node.expr):
                if isinstance(sub, Var):
                    t = env.get(sub.name)
                    if t is not None and not is_numeric(t):
                        out.append(Diagnostic("DiffGuardNotReal", f"differential guard mentions non-Real variable {sub.name}", node.span, node.node_id))
                elif isinstance(sub, Binary) and sub.op in ("==", "!="):
                    out.append(Diagnostic("DiffGuardEquality", "differential guards are limited to weak inequalities", node.span, node.node_id))
                elif isinstance(sub, Unary) and sub.op == "!":
                    out.append(Diagnostic("DiffGuardNegation", "differential guards are limited to weak inequalities", node.span, node.node_id))
        elif isinstance(node, DurationStmt) and node.high is not None:
            if not structurally_equal(node.low, node.high):
                out.append(Diagnostic("DurationBoundsDiffer", "duration(a, b) requires a = b; semantics for distinct bounds are undefined", node.span, node.node_id))
        elif isinstance(node, Assign):
            if node.cost is not None and isinstance(node.cost, Num) and node.cost.value < 0:
                out.append(Diagnostic("NegativeCost", "cost annotations must be nonnegative", node.span, node.node_id))
            if node.decl_type is None and node.target is not None and cd is not None:
                # assignment to an existing name; check controlled values into fields
                field_names = {f.name for f in cd.all_field_decls()}
                if node.target in field_names and isinstance(node.rhs, NewRhs) and node.rhs.class_name in controlled:
                    out.append(Diagnostic("ControlledValueInField", f"controlled object of class {node.rhs.class_name} stored in field {node.target}", node.span, node.node_id))
        if isinstance(node, Stmt) and node.cost is not None and isinstance(node.cost, Num) and node.cost.value < 0:
            if not isinstance(node, Assign):
                out.append(Diagnostic("NegativeCost", "cost annotations must be nonnegative", node.span, node.node_id))


def _validate_unique_ids(program, out):
    seen: set[int] = set()
    for node in iter_nodes(program):
        if node.node_id in seen:
            out.append(Diagnostic("DuplicateNodeId", f"node id {node.node_id} reused", node.span, node.node_id))
        seen.add(node.node_id)
    sps: set[int] = set()
    for node in iter_nodes(program):
        if isinstance(node, Await):
            if node.suspension_point in sps:
                out.append(Diagnostic("DuplicateSuspensionPoint", f"suspension point {node.suspension_point} reused", node.span, node.node_id))
            sps.add(node.suspension_point)


# ---------------------------------------------------------------------------
# Pretty printer (round-trips through the parser)

_PRECEDENCE = {
    "||": 1, "|": 1,
    "&&": 2, "&": 2,
    "<=": 3, ">=": 3, "==": 3, "!=": 3,
    "+": 4, "-": 4,
    "*": 5, "/": 5,
}


def _fmt_num(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    return f"{v.numerator}/{v.denominator}"


def print_expr(e: Expr, parent_prec: int = 0) -> str:
    match e:
        case Num(value=v):
            s = _fmt_num(v)
            return f"({s})" if v < 0 and parent_prec > 0 else s
        case BoolLit(value=v):
            return "true" if v else "false"
        case NullLit():
            return "null"
        case Var(name=n):
            return n
        case Unary(op=op, operand=x):
            return f"{op}{print_expr(x, 6)}"
        case Binary(op=op, left=l, right=r):
            prec = _PRECEDENCE[op]
            s = f"{print_expr(l, prec)} {op} {print_expr(r, prec + 1)}"
            return f"({s})" if prec < parent_prec else s
    raise TypeError(f"unknown expression {e!r}")


def _print_guard(g: Guard) -> str:
    match g:
        case FutureGuard(expr=e):
            return f"{print_expr(e, 6)}?"
        case DurationGuard(expr=e):
            return f"duration({print_expr(e)})"
        case DiffGuard(expr=e):
            return f"diff {print_expr(e)}"
    raise TypeError(f"unknown guard {g!r}")


def _print_rhs(r: Rhs) -> str:
    match r:
        case ExprRhs(expr=e):
            return print_expr(e)
        case NewRhs(class_name=c, args=args):
            return f"new {c}({', '.join(print_expr(a) for a in args)})"
        case GetRhs(expr=e):
            return f"{print_expr(e, 6)}.get"
        case CallRhs(callee=c, method=m, args=args):
            return f"{print_expr(c, 6)}!{m}({', '.join(print_expr(a) for a in args)})"
    raise TypeError(f"unknown rhs {r!r}")


def _bounds_text(b: tuple[CountExpr, CountExpr]) -> str:
    return f"[{b[0].to_text()}, {b[1].to_text()}]"


def _stmt_prefix(s: Stmt) -> str:
    parts = []
    if s.ctx_bounds is not None:
        parts.append(f"/*@ ctx_bounds: {_bounds_text(s.ctx_bounds)} @*/ ")
    if s.cost is not None:
        parts.append(f"[Cost: {print_expr(s.cost)}] ")
    if isinstance(s, Assign) and s.dc is not None:
        parts.append(f"[DC: {print_expr(s.dc)}] ")
    return "".join(parts)


def _print_stmt(s: Stmt, indent: str, out: list[str]) -> None:
    pre = indent + _stmt_prefix(s)
    match s:
        case Block():
            out.append(indent + "{")
            for inner in s.stmts:
                _print_stmt(inner, indent + "  ", out)
            out.append(indent + "}")
        case While(cond=c, body=b):
            out.append(pre + f"while ({print_expr(c)}) {{")
            for inner in b.stmts:
                _print_stmt(inner, indent + "  ", out)
            out.append(indent + "}")
        case If(cond=c, then=t, els=e):
            out.append(pre + f"if ({print_expr(c)}) {{")
            for inner in t.stmts:
                _print_stmt(inner, indent + "  ", out)
            if e is not None:
                out.append(indent + "} else {")
                for inner in e.stmts:
                    _print_stmt(inner, indent + "  ", out)
            out.append(indent + "}")
        case Await(guard=g):
            out.append(pre + f"await {_print_guard(g)};")
        case Assign(decl_type=t, target=x, rhs=r):
            if x is None:
                out.append(pre + f"{_print_rhs(r)};")
            elif t is None:
                out.append(pre + f"{x} = {_print_rhs(r)};")
            else:
                out.append(pre + f"{t} {x} = {_print_rhs(r)};")
        case DurationStmt(low=lo, high=hi):
            if hi is None:
                out.append(pre + f"duration({print_expr(lo)});")
            else:
                out.append(pre + f"duration({print_expr(lo)}, {print_expr(hi)});")
        case Skip():
            out.append(pre + "skip;")
        case Return(expr=e):
            out.append(pre + ("return;" if e is None else f"return {print_expr(e)};"))
        case _:
            raise TypeError(f"unknown statement {s!r}")


def pretty_print(program: Program) -> str:
    """Emit concrete syntax that re-parses to a structurally identical AST."""
    out: list[str] = []
    for cd in program.classes:
        if cd.creation_condition is not None:
            out.append(f"/*@ requires {print_expr(cd.creation_condition)} @*/")
        if cd.invariant is not None:
            out.append(f"/*@ invariant {print_expr(cd.invariant)} @*/")
        params = ", ".join(f"{t} {n}" for t, n in cd.ctor_params)
        out.append(f"class {cd.name}({params}) {{")
        for f in cd.fields:
            phys = "physical " if f.physical else ""
            init = f" = {print_expr(f.init)}" if f.init is not None else ""
            out.append(f"  {phys}{f.type} {f.name}{init};")
        if cd.physical_block is not None:
            eqs = " ".join(f"{o.field_name}' = {print_expr(o.rhs)};" for o in cd.physical_block)
            out.append(f"  physical {{ {eqs} }}")
        if cd.init_block is not None:
            out.append("  {")
            for s in cd.init_block.stmts:
                _print_stmt(s, "    ", out)
            out.append("  }")
        for m in cd.methods:
            if m.precondition is not None:
                out.append(f"  /*@ requires {print_expr(m.precondition)} @*/")
            if m.timed_requires is not None:
                out.append(f"  /*@ timed_requires {_fmt_num(m.timed_requires)} @*/")
            if m.time_control:
                items = ", ".join(
                    f"{e.location}.{e.method} = [{e.start.to_text()}, {e.end.to_text()}]"
                    for e in m.time_control
                )
                out.append(f"  /*@ time_control: {items} @*/")
            if m.time_bounds is not None:
                out.append(f"  /*@ time_bounds: {_bounds_text(m.time_bounds)} @*/")
            mparams = ", ".join(f"{t} {n}" for t, n in m.params)
            out.append(f"  {m.return_type} {m.name}({mparams}) {{")
            for s in m.body.stmts:
                _print_stmt(s, "    ", out)
            if m.ret is not None:
                out.append(f"    return {print_expr(m.ret)};")
            out.append("  }")
        out.append("}")
        out.append("")
    out.append("{")
    for s in program.main.stmts:
        _print_stmt(s, "  ", out)
    out.append("}")
    return "\n".join(out) + "\n"
