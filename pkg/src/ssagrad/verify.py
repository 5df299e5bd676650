"""Static checks: SSA form, dominance, types, terminators, structure.

``verify`` never raises on bad input; it returns diagnostics. A clean
module returns an empty list. Checks run in phases per function and a
function's later phases are skipped once it has a diagnostic, so one
corruption reports once instead of cascading.
"""

from __future__ import annotations

from .ir import Br, Diagnostic, Function, Jmp, Module, Ret, BOOL
from .ops import OpTypeError, result_type
from .structure import (
    StructureError,
    dominators,
    predecessors,
    reverse_postorder,
    structurize,
)


def verify(module: Module) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    for fn in module.functions.values():
        diags.extend(_verify_function(fn, module))
    return diags


def verify_ok(module: Module) -> bool:
    return not verify(module)


def _verify_function(fn: Function, module: Module) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def err(block: str, msg: str):
        diags.append(Diagnostic(fn.name, block, msg))

    if not fn.blocks:
        err("", "function has no blocks")
        return diags

    names = [b.name for b in fn.blocks]
    if len(set(names)) != len(names):
        seen = set()
        for n in names:
            if n in seen:
                err(n, "duplicate block name")
                return diags
            seen.add(n)
    blocks = {b.name: b for b in fn.blocks}

    for b in fn.blocks:
        if b.term is None:
            err(b.name, "missing terminator")
        else:
            for t in _targets(b):
                if t not in blocks:
                    err(b.name, f"terminator targets unknown block ^{t}")
    if diags:
        return diags

    dom = dominators(fn)
    for b in fn.blocks:
        if b.name not in dom:
            err(b.name, "unreachable block")
    preds = predecessors(fn)
    if preds[fn.blocks[0].name]:
        err(fn.blocks[0].name, "entry block has predecessors")
    if diags:
        return diags

    # SSA: single definition per value, definitions dominate uses
    defsite: dict[int, tuple[str, int]] = {}
    for b in fn.blocks:
        for vid, _ in b.params:
            if vid in defsite:
                err(b.name, f"%{fn.value_name(vid)} defined more than once")
            defsite[vid] = (b.name, -1)
        for i, ins in enumerate(b.body):
            if ins.result in defsite:
                err(b.name, f"%{fn.value_name(ins.result)} defined more than once")
            defsite[ins.result] = (b.name, i)
    if diags:
        return diags

    def check_use(vid: int, block: str, index: int):
        site = defsite.get(vid)
        if site is None:
            err(block, f"use of undefined value %{fn.value_name(vid)}")
            return
        db, di = site
        if db == block:
            if di >= index:
                err(block, f"%{fn.value_name(vid)} used before its definition")
        elif db not in dom[block]:
            err(block, f"%{fn.value_name(vid)} does not dominate its use")

    for b in fn.blocks:
        for i, ins in enumerate(b.body):
            for o in ins.operands:
                check_use(o, b.name, i)
        end = len(b.body)
        for o in _term_uses(b):
            check_use(o, b.name, end)
    if diags:
        return diags

    # typing, in reverse postorder so dominating defs are typed first
    types: dict[int, object] = {}
    for name in reverse_postorder(fn):
        b = blocks[name]
        for vid, ty in b.params:
            types[vid] = ty
        for ins in b.body:
            opnd = tuple(types.get(o) for o in ins.operands)
            if any(t is None for t in opnd):
                types[ins.result] = None  # upstream already failed; stay quiet
                continue
            try:
                types[ins.result] = result_type(ins.op, opnd, ins.attrs, module)
            except OpTypeError as e:
                err(name, f"%{fn.value_name(ins.result)}: {e}")
                types[ins.result] = None
    if diags:
        return diags

    def check_edge(block: str, target: str, args: tuple[int, ...]):
        params = blocks[target].params
        if len(args) != len(params):
            err(block, f"edge to ^{target} passes {len(args)} args for {len(params)} params")
            return
        for a, (pv, pty) in zip(args, params):
            aty = types.get(a)
            if aty is not None and aty != pty:
                err(
                    block,
                    f"edge to ^{target}: %{fn.value_name(a)} has type {aty}, "
                    f"param %{fn.value_name(pv)} wants {pty}",
                )

    for b in fn.blocks:
        t = b.term
        if isinstance(t, Ret):
            if len(t.values) != len(fn.results):
                err(b.name, f"ret carries {len(t.values)} values for {len(fn.results)} results")
            else:
                for v, rty in zip(t.values, fn.results):
                    vty = types.get(v)
                    if vty is not None and vty != rty:
                        err(b.name, f"ret value %{fn.value_name(v)} has type {vty}, want {rty}")
        elif isinstance(t, Jmp):
            check_edge(b.name, t.target, t.args)
        elif isinstance(t, Br):
            cty = types.get(t.cond)
            if cty is not None and cty != BOOL:
                err(b.name, f"br condition %{fn.value_name(t.cond)} has type {cty}, want bool")
            check_edge(b.name, t.then_target, t.then_args)
            check_edge(b.name, t.else_target, t.else_args)
    if diags:
        return diags

    try:
        structurize(fn, module)
    except StructureError as e:
        err("", str(e))
    return diags


def _targets(b) -> list[str]:
    t = b.term
    if isinstance(t, Jmp):
        return [t.target]
    if isinstance(t, Br):
        return [t.then_target, t.else_target]
    return []


def _term_uses(b) -> tuple[int, ...]:
    t = b.term
    if isinstance(t, Ret):
        return t.values
    if isinstance(t, Jmp):
        return t.args
    if isinstance(t, Br):
        return (t.cond,) + t.then_args + t.else_args
    return ()
