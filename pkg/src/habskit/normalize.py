"""Program rewrites that bring methods into the restricted checkable form.

Three passes, applied in order by :func:`normalize`:

* ``eliminate_loops`` turns every while loop into a fresh synthetic method
  on the same class.  The loop site becomes an asynchronous self-call that
  is immediately awaited, so the caller's continuation runs only after the
  loop has finished, as under the original cooperative semantics.  The
  synthetic method re-tests the condition and recurses the same way.
* ``ssa_rename`` gives every local reassignment a fresh name and rewrites
  reads to the reaching definition.  Fields are untouched.
* ``insert_leading_suspension`` prepends ``await diff true`` to every
  method whose body does not already start with an await.
"""

from __future__ import annotations

import copy
from dataclasses import replace
from fractions import Fraction
from typing import Optional

from . import ast as A
from .counting import CountExpr, ZERO


class NormalizeError(Exception):
    def __init__(self, message: str, span: A.SourceSpan = A.NO_SPAN):
        super().__init__(f"{span}: {message}" if span != A.NO_SPAN else message)
        self.span = span


def normalize(program: A.Program) -> A.Program:
    return insert_leading_suspension(ssa_rename(eliminate_loops(program)))


# ---------------------------------------------------------------------------
# Loop elimination


def _vars_read(node) -> set[str]:
    return {n.name for n in A.iter_nodes(node) if isinstance(n, A.Var)}


def _vars_assigned(node) -> set[str]:
    return {
        n.target
        for n in A.iter_nodes(node)
        if isinstance(n, A.Assign) and n.target is not None
    }


def _vars_declared(node) -> set[str]:
    return {
        n.target
        for n in A.iter_nodes(node)
        if isinstance(n, A.Assign) and n.target is not None and n.decl_type is not None
    }


def _reads_after(stmts: list[A.Stmt], index: int) -> set[str]:
    after: set[str] = set()
    for s in stmts[index + 1 :]:
        after |= _vars_read(s)
    return after


class _LoopLifter:
    def __init__(self, program: A.Program, ids: A.NodeIdAllocator):
        self.program = program
        self.ids = ids

    def _mk(self, node: A.Node, span: A.SourceSpan) -> A.Node:
        node.node_id = self.ids.node()
        node.span = span
        return node

    def lift_method(self, cd: A.ClassDecl, m: A.MethodDecl, counter: list[int]) -> list[A.MethodDecl]:
        env = {n: t for t, n in m.params}
        new_body, extra = self._lift_block(cd, m, m.body, env, counter)
        m.body = new_body
        return extra

    def _lift_block(self, cd, m, block: A.Block, env: dict[str, A.Type], counter) -> tuple[A.Block, list[A.MethodDecl]]:
        extra: list[A.MethodDecl] = []
        out: list[A.Stmt] = []
        for idx, s in enumerate(block.stmts):
            if isinstance(s, A.Assign) and s.decl_type is not None and s.target is not None:
                env[s.target] = s.decl_type
            if isinstance(s, A.While):
                body, inner = self._lift_block(cd, m, s.body, dict(env), counter)
                extra.extend(inner)
                s = replace_while_body(s, body)
                synth, call_stmts = self._extract_loop(cd, m, s, env, counter, block.stmts, idx)
                extra.append(synth)
                out.extend(call_stmts)
                continue
            if isinstance(s, A.If):
                then, inner = self._lift_block(cd, m, s.then, dict(env), counter)
                extra.extend(inner)
                els = None
                if s.els is not None:
                    els, inner2 = self._lift_block(cd, m, s.els, dict(env), counter)
                    extra.extend(inner2)
                s.then, s.els = then, els
            out.append(s)
        block.stmts = out
        return block, extra

    def _extract_loop(self, cd, m, loop: A.While, env, counter, siblings, idx):
        span = loop.span
        used = (_vars_read(loop.cond) | _vars_read(loop.body)) - _vars_declared(loop.body)
        field_names = {f.name for f in cd.all_field_decls()} if cd else set()
        captured = sorted(n for n in used if n in env and n not in field_names and n != "this")
        escaping = (_vars_assigned(loop.body) - _vars_declared(loop.body)) & set(captured)
        if escaping & _reads_after(siblings, idx):
            raise NormalizeError(
                f"loop assigns {sorted(escaping)} which are read after the loop; "
                "values cannot flow back through the synthetic method",
                span,
            )
        if cd is None:
            raise NormalizeError("loops in the main block are not supported; move the loop into a method", span)

        name = f"{m.name}$loop{counter[0]}"
        counter[0] += 1
        params = [(env[n], n) for n in captured]
        ctrl = self._derived_time_control(cd, m, loop, captured)

        rec_call = self._mk(
            A.Assign(
                decl_type=A.Type("Fut", A.UNIT),
                target=f"{name}$rec",
                rhs=self._mk(
                    A.CallRhs(
                        callee=self._mk(A.Var(name="this"), span),
                        method=name,
                        args=[self._mk(A.Var(name=n), span) for n in captured],
                    ),
                    span,
                ),
            ),
            span,
        )
        rec_await = self._mk(
            A.Await(
                guard=self._mk(A.FutureGuard(expr=self._mk(A.Var(name=f"{name}$rec"), span)), span),
                suspension_point=self.ids.suspension_point(),
            ),
            span,
        )
        then_block = self._mk(A.Block(stmts=loop.body.stmts + [rec_call, rec_await]), span)
        synth_body = self._mk(
            A.Block(stmts=[self._mk(A.If(cond=loop.cond, then=then_block, els=None), span)]),
            span,
        )
        synth = self._mk(
            A.MethodDecl(
                return_type=A.UNIT,
                name=name,
                params=params,
                body=synth_body,
                ret=None,
                time_control=ctrl,
            ),
            span,
        )

        call_stmt = self._mk(
            A.Assign(
                decl_type=A.Type("Fut", A.UNIT),
                target=f"{name}$f",
                rhs=self._mk(
                    A.CallRhs(
                        callee=self._mk(A.Var(name="this"), span),
                        method=name,
                        args=[self._mk(A.Var(name=n), span) for n in captured],
                    ),
                    span,
                ),
            ),
            span,
        )
        await_stmt = self._mk(
            A.Await(
                guard=self._mk(A.FutureGuard(expr=self._mk(A.Var(name=f"{name}$f"), span)), span),
                suspension_point=self.ids.suspension_point(),
            ),
            span,
        )
        return synth, [call_stmt, await_stmt]

    def _derived_time_control(self, cd, m, loop: A.While, captured: list[str]) -> list[A.TimeControlEntry]:
        """Control annotation for the synthetic method, when derivable.

        Only needed when the loop body calls methods the enclosing method
        declared control over; the derived entry uses the first-call offset
        of the loop body (straight-line prefix only) and a zero end budget.
        """
        controlled = {(e.location, e.method): e for e in m.time_control}
        if not controlled:
            return []
        called: set[tuple[str, str]] = set()
        for n in A.iter_nodes(loop.body):
            if isinstance(n, A.CallRhs) and isinstance(n.callee, A.Var):
                key = (n.callee.name, n.method)
                if key in controlled:
                    called.add(key)
        if not called:
            return []
        entries = []
        for key in sorted(called):
            offset = self._first_call_offset(loop.body, key)
            if offset is None:
                raise NormalizeError(
                    f"cannot derive a control annotation for {key[0]}.{key[1]} in the extracted loop; "
                    "annotate the loop-free form manually",
                    loop.span,
                )
            entries.append(A.TimeControlEntry(key[0], key[1], offset, ZERO))
        return entries

    def _first_call_offset(self, body: A.Block, key: tuple[str, str]) -> Optional[CountExpr]:
        elapsed = Fraction(0)
        for s in body.stmts:
            if isinstance(s, A.Assign) and isinstance(s.rhs, A.CallRhs):
                if isinstance(s.rhs.callee, A.Var) and (s.rhs.callee.name, s.rhs.method) == key:
                    return CountExpr.of(elapsed)
            if isinstance(s, A.Assign) and s.rhs is not None and isinstance(s.rhs, A.CallRhs):
                continue
            if isinstance(s, A.DurationStmt) and isinstance(s.low, A.Num):
                elapsed += s.low.value
            elif isinstance(s, A.Await) and isinstance(s.guard, A.DurationGuard) and isinstance(s.guard.expr, A.Num):
                elapsed += s.guard.expr.value
            elif isinstance(s, (A.Assign, A.Skip)):
                continue
            else:
                return None
        return None


def replace_while_body(w: A.While, body: A.Block) -> A.While:
    w.body = body
    return w


def eliminate_loops(program: A.Program) -> A.Program:
    """Replace every while loop with a synchronized recursive synthetic method."""
    program = copy.deepcopy(program)
    ids = A.NodeIdAllocator.continuing(program)
    lifter = _LoopLifter(program, ids)
    for cd in program.classes:
        counter_by_method: dict[str, list[int]] = {}
        new_methods: list[A.MethodDecl] = []
        for m in cd.methods:
            counter = counter_by_method.setdefault(m.name, [0])
            new_methods.extend(lifter.lift_method(cd, m, counter))
        cd.methods.extend(new_methods)
        if cd.init_block is not None:
            if any(isinstance(n, A.While) for n in A.iter_nodes(cd.init_block)):
                raise NormalizeError(f"loops in the init block of {cd.name} are not supported", cd.span)
    if any(isinstance(n, A.While) for n in A.iter_nodes(program.main)):
        raise NormalizeError("loops in the main block are not supported; move the loop into a method", program.main.span)
    return program


# ---------------------------------------------------------------------------
# Single-assignment renaming


class _SsaScope:
    def __init__(self, ids: A.NodeIdAllocator):
        self.ids = ids
        self.counter: dict[str, int] = {}

    def fresh(self, base: str) -> str:
        k = self.counter.get(base, 0) + 1
        self.counter[base] = k
        return f"{base}${k}"


def _rename_expr(e: A.Expr, subst: dict[str, str]) -> None:
    for n in A.iter_nodes(e):
        if isinstance(n, A.Var) and n.name in subst:
            n.name = subst[n.name]


def _rename_stmt_reads(s: A.Stmt, subst: dict[str, str]) -> None:
    match s:
        case A.Assign(rhs=r):
            _rename_expr(r, subst)
            if s.cost is not None:
                _rename_expr(s.cost, subst)
            if s.dc is not None:
                _rename_expr(s.dc, subst)
        case A.Await(guard=g):
            _rename_expr(g, subst)
        case A.DurationStmt(low=lo, high=hi):
            _rename_expr(lo, subst)
            if hi is not None:
                _rename_expr(hi, subst)
        case A.Return(expr=e):
            if e is not None:
                _rename_expr(e, subst)
        case _:
            pass


def _ssa_block(block: A.Block, subst: dict[str, str], types: dict[str, A.Type],
               declared: set[str], scope: _SsaScope) -> dict[str, str]:
    """Rewrite a block in place; returns the substitution after the block."""
    out: list[A.Stmt] = []
    for s in block.stmts:
        if isinstance(s, A.If):
            _rename_expr(s.cond, subst)
            sub_then = dict(subst)
            sub_else = dict(subst)
            end_then = _ssa_block(s.then, sub_then, types, set(declared), scope)
            end_else = _ssa_block(s.els, sub_else, types, set(declared), scope) if s.els is not None else dict(subst)
            # merge: variables renamed differently in the branches get a fresh
            # merged name, bound at the end of each branch, if read later
            merged = dict(subst)
            read_later = _reads_after(block.stmts, block.stmts.index(s))
            for name in declared:
                tn, te = end_then.get(name, name), end_else.get(name, name)
                if tn == te:
                    merged[name] = tn
                    continue
                if name not in read_later:
                    continue
                fresh = scope.fresh(name)
                ty = types.get(name, A.REAL)
                for blk, src in ((s.then, tn), (s.els, te)):
                    bind = A.Assign(decl_type=ty, target=fresh, rhs=A.ExprRhs(expr=A.Var(name=src)))
                    bind.node_id = scope.ids.node()
                    bind.rhs.node_id = scope.ids.node()
                    bind.rhs.expr.node_id = scope.ids.node()
                    bind.span = s.span
                    if blk is None:
                        blk = A.Block(stmts=[])
                        blk.node_id = scope.ids.node()
                        blk.span = s.span
                        s.els = blk
                    blk.stmts.append(bind)
                merged[name] = fresh
                types[fresh] = ty
            subst = merged
            out.append(s)
            continue
        if isinstance(s, A.While):
            raise NormalizeError("single-assignment renaming expects a loop-free program", s.span)
        _rename_stmt_reads(s, subst)
        if isinstance(s, A.Assign) and s.target is not None:
            if s.decl_type is not None:
                declared.add(s.target)
                types[s.target] = s.decl_type
                subst.pop(s.target, None)
            elif s.target in declared:
                fresh = scope.fresh(s.target)
                types[fresh] = types.get(s.target, A.REAL)
                s.decl_type = types.get(s.target, A.REAL)
                subst[s.target] = fresh
                s.target = fresh
                declared.add(fresh)
            # field targets keep their name
        out.append(s)
    block.stmts = out
    return subst


def ssa_rename(program: A.Program) -> A.Program:
    """Give every local reassignment a fresh name (fields are untouched)."""
    program = copy.deepcopy(program)
    ids = A.NodeIdAllocator.continuing(program)
    scope = _SsaScope(ids)
    for cd in program.classes:
        for m in cd.methods:
            declared = {n for _, n in m.params}
            types = {n: t for t, n in m.params}
            end = _ssa_block(m.body, {}, types, declared, scope)
            if m.ret is not None:
                _rename_expr(m.ret, end)
        if cd.init_block is not None:
            _ssa_block(cd.init_block, {}, {}, set(), scope)
    _ssa_block(program.main, {}, {}, set(), scope)
    return program


# ---------------------------------------------------------------------------
# Leading suspensions


def _leads_with_await(body: A.Block) -> bool:
    return bool(body.stmts) and isinstance(body.stmts[0], A.Await)


def insert_leading_suspension(program: A.Program) -> A.Program:
    """Prepend ``await diff true`` to methods that do not start with an await."""
    program = copy.deepcopy(program)
    ids = A.NodeIdAllocator.continuing(program)
    for cd in program.classes:
        for m in cd.methods:
            if _leads_with_await(m.body):
                continue
            guard = A.DiffGuard(expr=A.BoolLit(value=True))
            guard.node_id = ids.node()
            guard.expr.node_id = ids.node()
            guard.span = m.span
            aw = A.Await(guard=guard, suspension_point=ids.suspension_point())
            aw.node_id = ids.node()
            aw.span = m.span
            m.body.stmts.insert(0, aw)
    return program
