"""Execution-time oracle: per-method and per-statement duration bounds.

The delegated-control checker is parametric in a time analysis.  This
module ships a conservative built-in one:

* ``duration(k)`` and ``await duration(k)`` with a constant-foldable ``k``
  take exactly ``[k, k]``;
* expressions, assignments, calls, object creations and reads of already
  resolved futures take ``[0, 0]`` locally;
* ``await f?`` (and a blocking read of ``f``) takes the callee's bounds
  minus the time that has certainly/possibly elapsed since the call,
  clamped at zero, with branch joins widened to the interval hull;
* ``await diff e`` takes ``[0, 0]`` for the trivial guard ``true`` and
  ``[0, oo]`` otherwise;
* method bounds are a least fixpoint over the call graph; methods that
  synchronize with their own recursion on every path can never terminate
  and are pinned at ``[oo, oo]``; non-converging methods are widened to
  ``[0, oo]``.

User overrides refine the analysis: ``time_bounds`` on a method or a
sidecar file entry ``Class.method = [a, b]`` replaces that method's
bounds; a ``ctx_bounds`` annotation on a call statement creates a
distinct execution context whose callee bounds are as annotated.  The
annotated context answers the caller's queries only; the callee itself
still executes in its default context.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from . import ast as A
from .counting import (
    CountExpr, POS_INF, ZERO, add, clamp_nonneg, is_infty, leq, maximum, minimum, sub,
)


class OverrideConflict(Exception):
    pass


@dataclass(frozen=True)
class TimeBounds:
    low: CountExpr
    high: CountExpr

    def __post_init__(self):
        if not leq(self.low, self.high):
            raise ValueError(f"invalid bounds [{self.low}, {self.high}]")

    def __str__(self) -> str:
        return f"[{self.low}, {self.high}]"

    @staticmethod
    def of(lo, hi) -> "TimeBounds":
        return TimeBounds(CountExpr.of(lo), CountExpr.of(hi))

    def plus(self, other: "TimeBounds") -> "TimeBounds":
        return TimeBounds(add(self.low, other.low), add(self.high, other.high))

    def hull(self, other: "TimeBounds") -> "TimeBounds":
        return TimeBounds(minimum(self.low, other.low), maximum(self.high, other.high))


ZERO_BOUNDS = TimeBounds(ZERO, ZERO)
UNKNOWN_BOUNDS = TimeBounds(ZERO, POS_INF)
INFINITE_BOUNDS = TimeBounds(POS_INF, POS_INF)


@dataclass(frozen=True)
class ExecContext:
    """An execution context: a method, optionally refined by a call site."""

    method: str  # qualified "Class.method", or "main"
    site: Optional[int] = None  # node id of an annotated call statement

    def __str__(self) -> str:
        return self.method if self.site is None else f"{self.method}@{self.site}"


@dataclass
class Violation:
    kind: str  # "statement" | "method"
    method: str
    node_id: int
    expected: TimeBounds
    measured: CountExpr
    at: Fraction

    def __str__(self) -> str:
        return (f"{self.kind} bounds violated in {self.method}: measured {self.measured} "
                f"outside {self.expected} (at clock {self.at})")


# ---------------------------------------------------------------------------
# Constant folding


def const_fold(e: A.Expr) -> Optional[Fraction]:
    match e:
        case A.Num(value=v):
            return v
        case A.Unary(op="-", operand=x):
            v = const_fold(x)
            return None if v is None else -v
        case A.Binary(op=op, left=l, right=r) if op in "+-*/":
            a, b = const_fold(l), const_fold(r)
            if a is None or b is None:
                return None
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            return a / b if b != 0 else None
    return None


# ---------------------------------------------------------------------------
# Override parsing (sidecar file)


def parse_overrides(text: str) -> dict[str, TimeBounds]:
    """Parse ``Class.method = [a, b]`` lines; ``@<nodeid>`` keys override statements."""
    out: dict[str, TimeBounds] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed override line: {raw!r}")
        key, _, rhs = line.partition("=")
        rhs = rhs.strip()
        if not (rhs.startswith("[") and rhs.endswith("]")):
            raise ValueError(f"malformed bounds in override line: {raw!r}")
        lo_txt, _, hi_txt = rhs[1:-1].partition(",")
        out[key.strip()] = TimeBounds(CountExpr.from_text(lo_txt), CountExpr.from_text(hi_txt))
    return out


# ---------------------------------------------------------------------------
# The built-in oracle


@dataclass
class _FutInfo:
    callee: Optional[str]
    bounds: TimeBounds
    elapsed: TimeBounds
    resolved: bool = False


class BuiltinOracle:
    """Deterministic execution-time oracle for a normalized program."""

    def __init__(self, program: A.Program, overrides: Optional[dict[str, TimeBounds]] = None):
        self.program = program
        self.overrides = dict(overrides or {})
        self.notes: list[str] = []
        self._method_keys = self._collect_method_keys()
        self._type_envs = {key: self._type_env(key) for key in self._method_keys | {"main"}}
        self._site_bounds: dict[int, tuple[str, TimeBounds]] = {}  # node -> (callee key, bounds)
        self._downgraded: set[int] = set()
        self._analyze_resources()
        self._method_bounds = self._fix_method_bounds(with_overrides=True)
        self._check_override_conflicts()
        self._stmt_bounds: dict[int, TimeBounds] = {}
        self._compute_stmt_bounds()
        self._contexts = self._collect_contexts()

    # -- public interface -------------------------------------------------

    def contexts_of(self, method: str) -> list[ExecContext]:
        return list(self._contexts.get(method, [ExecContext(method)]))

    def call_context(self, ctx: ExecContext, site_node_id: int) -> ExecContext:
        info = self._site_bounds.get(site_node_id)
        if info is not None:
            return ExecContext(info[0], site_node_id)
        callee = self._call_site_callee(site_node_id)
        return ExecContext(callee if callee is not None else "<unknown>")

    def bounds_method(self, ctx: ExecContext, method: str) -> TimeBounds:
        if ctx.site is not None and ctx.method == method:
            return self._site_bounds[ctx.site][1]
        return self._method_bounds.get(method, UNKNOWN_BOUNDS)

    def bounds_stmt(self, ctx: ExecContext, node_id: int) -> TimeBounds:
        key = f"@{node_id}"
        if key in self.overrides:
            return self.overrides[key]
        return self._stmt_bounds.get(node_id, ZERO_BOUNDS)

    # -- tables ------------------------------------------------------------

    def _collect_method_keys(self) -> set[str]:
        keys = set()
        for cd in self.program.classes:
            for m in cd.methods:
                keys.add(f"{cd.name}.{m.name}")
        return keys

    def _bodies(self) -> Iterable[tuple[str, Optional[A.ClassDecl], A.Block]]:
        for cd in self.program.classes:
            for m in cd.methods:
                yield f"{cd.name}.{m.name}", cd, m.body
            if cd.init_block is not None:
                yield f"{cd.name}.<init>", cd, cd.init_block
        yield "main", None, self.program.main

    def _find_method(self, key: str) -> Optional[A.MethodDecl]:
        if "." not in key:
            return None
        cls, _, name = key.partition(".")
        cd = self.program.find_class(cls)
        return cd.find_method(name) if cd else None

    def _type_env(self, key: str) -> dict[str, A.Type]:
        env: dict[str, A.Type] = {}
        if key == "main":
            body = self.program.main
            cd = None
        else:
            cls, _, name = key.partition(".")
            cd = self.program.find_class(cls)
            if cd is None:
                return env
            for f in cd.all_field_decls():
                env[f.name] = f.type
            env["this"] = A.Type(cd.name)
            m = cd.find_method(name)
            if m is None:
                return env
            for t, n in m.params:
                env[n] = t
            body = m.body
        for node in A.iter_nodes(body):
            if isinstance(node, A.Assign) and node.decl_type is not None and node.target:
                env.setdefault(node.target, node.decl_type)
        return env

    def callee_key(self, caller: str, call: A.CallRhs) -> Optional[str]:
        env = self._type_envs.get(caller, {})
        if isinstance(call.callee, A.Var):
            t = env.get(call.callee.name)
            if t is not None and self.program.find_class(t.name) is not None:
                return f"{t.name}.{call.method}"
        return None

    def _call_site_callee(self, node_id: int) -> Optional[str]:
        for key, _, body in self._bodies():
            for node in A.iter_nodes(body):
                if isinstance(node, A.Assign) and node.node_id == node_id and isinstance(node.rhs, A.CallRhs):
                    return self.callee_key(key, node.rhs)
        return None

    def _collect_contexts(self) -> dict[str, list[ExecContext]]:
        ctxs: dict[str, list[ExecContext]] = {key: [ExecContext(key)] for key in self._method_keys | {"main"}}
        for node_id, (callee, _) in sorted(self._site_bounds.items()):
            ctxs.setdefault(callee, [ExecContext(callee)]).append(ExecContext(callee, node_id))
        return ctxs

    # -- resource capacity ---------------------------------------------------

    def _analyze_resources(self) -> None:
        """Flag statements whose cost can outrun its pool's per-unit refill."""
        for key, _, body in self._bodies():
            pools: dict[str, Fraction] = {}
            placements: dict[str, list[str]] = {}
            for node in A.iter_nodes(body):
                if not isinstance(node, A.Assign) or node.target is None:
                    continue
                if isinstance(node.rhs, A.NewRhs) and node.rhs.class_name in A.DC_CLASS_NAMES:
                    cap = const_fold(node.rhs.args[0]) if node.rhs.args else None
                    if cap is not None:
                        pools[node.target] = cap
                elif isinstance(node.rhs, A.NewRhs) and node.dc is not None and isinstance(node.dc, A.Var):
                    placements.setdefault(node.dc.name, []).append(node.rhs.class_name)
            for pool_var, classes in placements.items():
                cap = pools.get(pool_var)
                if cap is None:
                    continue
                total = Fraction(0)
                cost_nodes: list[int] = []
                for cls_name in classes:
                    cd = self.program.find_class(cls_name)
                    if cd is None:
                        continue
                    for m in cd.methods:
                        for node in A.iter_nodes(m.body):
                            if isinstance(node, A.Stmt) and node.cost is not None:
                                v = const_fold(node.cost)
                                total += v if v is not None else cap + 1
                                cost_nodes.append(node.node_id)
                if total > cap:
                    self.notes.append(
                        f"resource pool created in {key} (capacity {cap}) may be exceeded by "
                        f"placed cost {total}; affected statements widened to [0, inf]"
                    )
                    self._downgraded.update(cost_nodes)

    # -- method bounds ---------------------------------------------------------

    def _method_override(self, key: str, with_overrides: bool) -> Optional[TimeBounds]:
        if not with_overrides:
            return None
        if key in self.overrides:
            return self.overrides[key]
        m = self._find_method(key)
        if m is not None and m.time_bounds is not None:
            return TimeBounds(m.time_bounds[0], m.time_bounds[1])
        return None

    def _call_graph(self) -> dict[str, set[str]]:
        graph: dict[str, set[str]] = {k: set() for k in self._method_keys}
        for key, _, body in self._bodies():
            if key not in graph:
                continue
            for node in A.iter_nodes(body):
                if isinstance(node, A.CallRhs):
                    callee = self.callee_key(key, node)
                    if callee is not None and callee in self._method_keys:
                        graph[key].add(callee)
        return graph

    def _reaches(self, graph: dict[str, set[str]]) -> dict[str, set[str]]:
        reach = {k: set(v) for k, v in graph.items()}
        changed = True
        while changed:
            changed = False
            for k in reach:
                extra = set()
                for mid in reach[k]:
                    extra |= reach.get(mid, set())
                if not extra <= reach[k]:
                    reach[k] |= extra
                    changed = True
        return reach

    def _always_nonterminating(self) -> set[str]:
        """Methods that synchronize with their own recursion on every path."""
        graph = self._call_graph()
        reach = self._reaches(graph)
        pinned = set()
        for key in self._method_keys:
            if key not in reach or key not in reach[key]:
                continue  # not recursive
            m = self._find_method(key)
            if m is None:
                continue
            if self._every_path_awaits_cycle(m.body.stmts, key, reach, {}):
                pinned.add(key)
        return pinned

    def _every_path_awaits_cycle(self, stmts, key, reach, futures: dict[str, str]) -> bool:
        futures = dict(futures)
        for s in stmts:
            if isinstance(s, A.Assign) and s.target and isinstance(s.rhs, A.CallRhs):
                callee = self.callee_key(key, s.rhs)
                if callee is not None:
                    futures[s.target] = callee
            is_sync = False
            if isinstance(s, A.Await) and isinstance(s.guard, A.FutureGuard) and isinstance(s.guard.expr, A.Var):
                is_sync = futures.get(s.guard.expr.name) is not None
                target = futures.get(s.guard.expr.name)
            elif isinstance(s, A.Assign) and isinstance(s.rhs, A.GetRhs) and isinstance(s.rhs.expr, A.Var):
                target = futures.get(s.rhs.expr.name)
                is_sync = target is not None
            else:
                target = None
            if is_sync and target is not None and key in reach.get(target, set()) | ({target} if target == key else set()):
                if target == key or key in reach.get(target, set()):
                    return True
            if isinstance(s, A.If):
                then_ok = self._every_path_awaits_cycle(s.then.stmts, key, reach, futures)
                else_ok = s.els is not None and self._every_path_awaits_cycle(s.els.stmts, key, reach, futures)
                if then_ok and else_ok:
                    return True
        return False

    def _fix_method_bounds(self, with_overrides: bool) -> dict[str, TimeBounds]:
        pinned: dict[str, TimeBounds] = {}
        for key in self._always_nonterminating():
            pinned[key] = INFINITE_BOUNDS
        if with_overrides:
            for key in self._method_keys:
                ov = self._method_override(key, True)
                if ov is not None:
                    pinned[key] = ov
        table = {key: pinned.get(key, ZERO_BOUNDS) for key in self._method_keys}
        n = max(len(self._method_keys), 1)
        converged = False
        for _ in range(2 * n + 1):
            changed = False
            for key in sorted(self._method_keys):
                if key in pinned:
                    continue
                m = self._find_method(key)
                if m is None:
                    continue
                new, _ = self._walk(m.body.stmts, key, table, {}, record=False)
                if new != table[key]:
                    table[key] = new
                    changed = True
            if not changed:
                converged = True
                break
        if not converged:
            # widen whatever is still moving, then propagate once
            moving = set()
            for key in sorted(self._method_keys):
                if key in pinned:
                    continue
                m = self._find_method(key)
                if m is None:
                    continue
                new, _ = self._walk(m.body.stmts, key, table, {}, record=False)
                if new != table[key]:
                    moving.add(key)
            for key in moving:
                table[key] = UNKNOWN_BOUNDS
            for _ in range(2):
                for key in sorted(self._method_keys):
                    if key in pinned or key in moving:
                        continue
                    m = self._find_method(key)
                    if m is not None:
                        table[key], _ = self._walk(m.body.stmts, key, table, {}, record=False)
        return table

    def _check_override_conflicts(self) -> None:
        pure = self._fix_method_bounds(with_overrides=False)
        for key in sorted(self._method_keys):
            ov = self._method_override(key, True)
            if ov is None:
                continue
            computed = pure.get(key, UNKNOWN_BOUNDS)
            if computed.low.is_finite and not leq(computed.low, ov.high):
                raise OverrideConflict(
                    f"override {ov} for {key} contradicts the computed lower bound {computed.low}"
                )

    # -- statement walk ----------------------------------------------------------

    def _compute_stmt_bounds(self) -> None:
        for key, _, body in self._bodies():
            self._walk(body.stmts, key, self._method_bounds, {}, record=True)

    def _callee_bounds_at(self, key: str, stmt: A.Assign, table) -> tuple[Optional[str], TimeBounds]:
        call = stmt.rhs
        assert isinstance(call, A.CallRhs)
        callee = self.callee_key(key, call)
        if stmt.ctx_bounds is not None:
            b = TimeBounds(stmt.ctx_bounds[0], stmt.ctx_bounds[1])
            if callee is not None:
                self._site_bounds[stmt.node_id] = (callee, b)
            return callee, b
        if callee is None:
            return None, UNKNOWN_BOUNDS
        return callee, table.get(callee, UNKNOWN_BOUNDS)

    def _walk(self, stmts, key: str, table, futures: dict[str, _FutInfo], record: bool) -> tuple[TimeBounds, dict[str, _FutInfo]]:
        total = ZERO_BOUNDS
        for s in stmts:
            if isinstance(s, A.If):
                b_then, fut_then = self._walk(s.then.stmts, key, table, copy.deepcopy(futures), record)
                if s.els is not None:
                    b_else, fut_else = self._walk(s.els.stmts, key, table, copy.deepcopy(futures), record)
                else:
                    b_else, fut_else = ZERO_BOUNDS, copy.deepcopy(futures)
                b = b_then.hull(b_else)
                futures = self._merge_futures(fut_then, fut_else)
                total = total.plus(b)
                if record:
                    self._stmt_bounds[s.node_id] = b
                continue
            if isinstance(s, A.While):
                b = UNKNOWN_BOUNDS
                futures = {}
            else:
                b = self._leaf_bounds(s, key, table, futures)
            if s.node_id in self._downgraded:
                b = UNKNOWN_BOUNDS
            if record:
                self._stmt_bounds[s.node_id] = b
            for info in futures.values():
                info.elapsed = info.elapsed.plus(b)
            self._post_update(s, key, table, futures)
            total = total.plus(b)
        return total, futures

    def _leaf_bounds(self, s, key, table, futures) -> TimeBounds:
        match s:
            case A.Await(guard=A.DurationGuard(expr=e)) | A.DurationStmt(low=e):
                v = const_fold(e)
                return TimeBounds.of(v, v) if v is not None else UNKNOWN_BOUNDS
            case A.Await(guard=A.DiffGuard(expr=e)):
                return ZERO_BOUNDS if isinstance(e, A.BoolLit) and e.value else UNKNOWN_BOUNDS
            case A.Await(guard=A.FutureGuard(expr=e)):
                return self._sync_bounds(e, futures)
            case A.Assign(rhs=A.GetRhs(expr=e)):
                return self._sync_bounds(e, futures)
            case _:
                return ZERO_BOUNDS

    def _sync_bounds(self, e: A.Expr, futures) -> TimeBounds:
        if isinstance(e, A.Var) and e.name in futures:
            info = futures[e.name]
            if info.resolved:
                return ZERO_BOUNDS
            lo = clamp_nonneg(sub(info.bounds.low, info.elapsed.high))
            hi = clamp_nonneg(sub(info.bounds.high, info.elapsed.low))
            return TimeBounds(lo, hi)
        return UNKNOWN_BOUNDS

    def _post_update(self, s, key, table, futures) -> None:
        if isinstance(s, A.Await) and isinstance(s.guard, A.FutureGuard) and isinstance(s.guard.expr, A.Var):
            if s.guard.expr.name in futures:
                futures[s.guard.expr.name].resolved = True
        elif isinstance(s, A.Assign):
            if isinstance(s.rhs, A.GetRhs) and isinstance(s.rhs.expr, A.Var) and s.rhs.expr.name in futures:
                futures[s.rhs.expr.name].resolved = True
            elif isinstance(s.rhs, A.CallRhs) and s.target is not None:
                callee, bounds = self._callee_bounds_at(key, s, table)
                futures[s.target] = _FutInfo(callee, bounds, ZERO_BOUNDS)
            elif isinstance(s.rhs, A.CallRhs):
                self._callee_bounds_at(key, s, table)  # register annotated sites
            elif s.target is not None and s.target in futures:
                del futures[s.target]

    @staticmethod
    def _merge_futures(a: dict[str, _FutInfo], b: dict[str, _FutInfo]) -> dict[str, _FutInfo]:
        out: dict[str, _FutInfo] = {}
        for name in a.keys() & b.keys():
            x, y = a[name], b[name]
            if x.callee != y.callee or x.resolved != y.resolved:
                continue
            out[name] = _FutInfo(x.callee, x.bounds.hull(y.bounds), x.elapsed.hull(y.elapsed), x.resolved)
        return out


def builtin_oracle(program: A.Program, overrides: Optional[dict[str, TimeBounds]] = None) -> BuiltinOracle:
    """Build the conservative oracle for a loop-free, single-assignment program."""
    return BuiltinOracle(program, overrides)


# ---------------------------------------------------------------------------
# Dynamic validation against a completed run


def validate_oracle(oracle: BuiltinOracle, run) -> list[Violation]:
    """Check a run's measured statement and method durations against the oracle."""
    out: list[Violation] = []
    for entry in run.statement_log:
        ctx = ExecContext(entry.method)
        b = oracle.bounds_stmt(ctx, entry.node_id)
        measured = CountExpr.of(entry.end - entry.start)
        if not (leq(b.low, measured) and leq(measured, b.high)):
            out.append(Violation("statement", entry.method, entry.node_id, b, measured, entry.end))
    for fut in run.future_log:
        if fut.resolve_time is None or fut.msg_time is None or fut.method is None:
            continue
        if fut.site_node is not None and fut.site_node in oracle._site_bounds:
            b = oracle._site_bounds[fut.site_node][1]
        else:
            b = oracle.bounds_method(ExecContext(fut.method), fut.method)
        measured = CountExpr.of(fut.resolve_time - fut.msg_time)
        if not (leq(b.low, measured) and leq(measured, b.high)):
            out.append(Violation("method", fut.method, fut.site_node or -1, b, measured, fut.resolve_time))
    return out
