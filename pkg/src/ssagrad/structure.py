"""Structured view of functions: recovery, emission, and CFG analyses.

The transforms in this package (adjoint generation, batching) do not
walk raw block graphs.  They run on a structured tree recovered here:
straight-line instructions, parallel copies, if/else diamonds and while
loops.  ``structurize`` rejects anything that is not in that shape, and
``flatten`` lowers a tree back to blocks, always in canonical shape.

Canonical loop form, which the transforms require:

* the header computes only its own condition (header-defined values are
  used by nothing but the condition chain),
* the loop body sits on the taken edge of the header branch,
* exit arguments are header parameters,
* the back edge is the jump at the tail of the body.

``vectorize`` emits loops whose body consumes one header-computed value
(the refreshed lane mask).  Those still structurize, with ``canonical``
set to False; they can be verified and interpreted but not transformed
again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ir import Block, Br, Function, Instruction, Jmp, Module, Ret, Type
from .ops import OpTypeError, result_type


class StructureError(Exception):
    """Raised when a function is not in structured form."""


# ----------------------------------------------------------- CFG math


def successors(block: Block) -> list[str]:
    t = block.term
    if isinstance(t, Jmp):
        return [t.target]
    if isinstance(t, Br):
        return [t.then_target, t.else_target]
    return []


def predecessors(fn: Function) -> dict[str, list[str]]:
    preds: dict[str, list[str]] = {b.name: [] for b in fn.blocks}
    for b in fn.blocks:
        for s in successors(b):
            preds[s].append(b.name)
    return preds


def reverse_postorder(fn: Function) -> list[str]:
    blocks = {b.name: b for b in fn.blocks}
    seen: dict[str, bool] = {}
    order: list[str] = []

    def visit(name: str):
        if name in seen:
            return
        seen[name] = True
        for s in successors(blocks[name]):
            visit(s)
        order.append(name)

    visit(fn.blocks[0].name)
    order.reverse()
    return order


def dominators(fn: Function) -> dict[str, frozenset[str]]:
    """Dominator sets for reachable blocks (iterative dataflow)."""
    rpo = reverse_postorder(fn)
    preds = predecessors(fn)
    entry = fn.blocks[0].name
    every = frozenset(rpo)
    dom: dict[str, frozenset[str]] = {n: every for n in rpo}
    dom[entry] = frozenset([entry])
    changed = True
    while changed:
        changed = False
        for n in rpo:
            if n == entry:
                continue
            ps = [dom[p] for p in preds[n] if p in dom]
            new = frozenset.intersection(*ps) | {n} if ps else frozenset([n])
            if new != dom[n]:
                dom[n] = new
                changed = True
    return dom


def postdominators(fn: Function) -> dict[str, frozenset[str]]:
    """Postdominator sets, computed toward the single ret block."""
    rets = [b.name for b in fn.blocks if isinstance(b.term, Ret)]
    if len(rets) != 1:
        raise StructureError(f"@{fn.name}: expected exactly one ret block, found {len(rets)}")
    exit_name = rets[0]
    succs = {b.name: successors(b) for b in fn.blocks}
    names = [b.name for b in fn.blocks]
    every = frozenset(names)
    pdom: dict[str, frozenset[str]] = {n: every for n in names}
    pdom[exit_name] = frozenset([exit_name])
    changed = True
    while changed:
        changed = False
        for n in names:
            if n == exit_name:
                continue
            ss = [pdom[s] for s in succs[n]]
            new = frozenset.intersection(*ss) | {n} if ss else frozenset([n])
            if new != pdom[n]:
                pdom[n] = new
                changed = True
    return pdom


def immediate_postdominator(pdom: dict[str, frozenset[str]], name: str) -> str | None:
    rest = pdom[name] - {name}
    if not rest:
        return None
    # postdominator sets nest along the chain; the immediate one has the
    # largest set among them
    return max(rest, key=lambda p: (len(pdom[p]), p))


# --------------------------------------------------------- type walk


def compute_types(fn: Function, module: Module | None = None) -> dict[int, Type]:
    """Type of every value; raises OpTypeError on an ill-typed op.

    Blocks are walked in reverse postorder, which sees every dominating
    definition before its uses; cross-block cycles only flow through
    typed block parameters.
    """
    types: dict[int, Type] = {}
    blocks = {b.name: b for b in fn.blocks}
    for name in reverse_postorder(fn):
        b = blocks[name]
        for vid, ty in b.params:
            types[vid] = ty
        for ins in b.body:
            try:
                opnd = tuple(types[o] for o in ins.operands)
            except KeyError as e:
                raise OpTypeError(
                    f"%{fn.value_name(ins.result)} uses an undefined or unreachable value"
                ) from e
            types[ins.result] = result_type(ins.op, opnd, ins.attrs, module)
    return types


# ----------------------------------------------------- region queries


def region_uses(nodes: list) -> set[int]:
    """Every value id a region reads, including nested regions."""
    used: set[int] = set()

    def scan(ns: list):
        for n in ns:
            if isinstance(n, SInstr):
                used.update(n.ins.operands)
            elif isinstance(n, SCopy):
                used.update(src for _, src in n.pairs)
            elif isinstance(n, SIf):
                used.add(n.cond)
                used.update(n.then_args)
                used.update(n.else_args)
                scan(n.then_region)
                scan(n.else_region)
            elif isinstance(n, SWhile):
                used.update(n.init)
                used.update(i for ins in n.header for i in ins.operands)
                used.add(n.cond)
                used.update(n.body_args)
                used.update(n.exit_args)
                scan(n.body_region)

    scan(nodes)
    return used


def region_defs(nodes: list) -> set[int]:
    """Every value id a region defines, including nested regions."""
    defs: set[int] = set()

    def scan(ns: list):
        for n in ns:
            if isinstance(n, SInstr):
                defs.add(n.ins.result)
            elif isinstance(n, SCopy):
                defs.update(dst for dst, _ in n.pairs)
            elif isinstance(n, SIf):
                defs.update(v for v, _ in n.merged)
                scan(n.then_region)
                scan(n.else_region)
            elif isinstance(n, SWhile):
                defs.update(v for v, _ in n.carried)
                defs.update(ins.result for ins in n.header)
                defs.update(v for v, _ in n.exits)
                scan(n.body_region)

    scan(nodes)
    return defs


# ------------------------------------------------------- tree nodes


@dataclass
class SInstr:
    ins: Instruction


@dataclass
class SCopy:
    """Parallel copies dst <- src, the structured form of a jump into a
    parameterized linear block."""

    pairs: list[tuple[int, int]]  # (dst, src)


@dataclass
class SIf:
    cond: int
    then_region: list
    then_args: tuple[int, ...]
    else_region: list
    else_args: tuple[int, ...]
    merged: list[tuple[int, Type]]


@dataclass
class SWhile:
    carried: list[tuple[int, Type]]
    init: tuple[int, ...]
    header: list[Instruction]
    cond: int
    body_region: list
    body_args: tuple[int, ...]
    exits: list[tuple[int, Type]]
    exit_args: tuple[int, ...]
    canonical: bool = True


@dataclass
class SFunc:
    name: str
    params: list[tuple[int, Type]]
    results: tuple[Type, ...]
    region: list
    ret_vals: tuple[int, ...]
    types: dict[int, Type]
    vnames: dict[int, str]
    next_id: int


# -------------------------------------------------------- recovery


def structurize(fn: Function, module: Module | None = None) -> SFunc:
    """Recover the structured tree of a function or raise StructureError."""
    if not fn.blocks:
        raise StructureError(f"@{fn.name}: no blocks")
    blocks = {b.name: b for b in fn.blocks}
    if len(blocks) != len(fn.blocks):
        raise StructureError(f"@{fn.name}: duplicate block names")
    for b in fn.blocks:
        if b.term is None:
            raise StructureError(f"@{fn.name} ^{b.name}: missing terminator")
    dom = dominators(fn)
    unreachable = [b.name for b in fn.blocks if b.name not in dom]
    if unreachable:
        raise StructureError(f"@{fn.name}: unreachable block ^{unreachable[0]}")
    preds = predecessors(fn)
    entry = fn.blocks[0].name
    if preds[entry]:
        raise StructureError(f"@{fn.name}: entry block has predecessors")
    pdom = postdominators(fn)

    # back edges and loop membership
    headers: dict[str, str] = {}  # header -> back edge source
    for b in fn.blocks:
        for s in successors(b):
            if s in dom[b.name]:  # edge into a dominator: back edge
                if not isinstance(b.term, Jmp):
                    raise StructureError(
                        f"@{fn.name} ^{b.name}: back edges must be unconditional jumps"
                    )
                if s in headers:
                    raise StructureError(f"@{fn.name} ^{s}: multiple back edges")
                if s == b.name:
                    raise StructureError(f"@{fn.name} ^{s}: self loop")
                headers[s] = b.name

    def natural_loop(header: str, latch: str) -> frozenset[str]:
        body = {header, latch}
        work = [latch]
        while work:
            n = work.pop()
            if n == header:
                continue
            for p in preds[n]:
                if p not in body:
                    body.add(p)
                    work.append(p)
        return frozenset(body)

    try:
        types = compute_types(fn, module)
    except OpTypeError as e:
        raise StructureError(f"@{fn.name}: {e}") from e

    ret_box: list[tuple[int, ...]] = []

    def make_while(name: str, init: tuple[int, ...]) -> tuple[SWhile, str]:
        b = blocks[name]
        if len(preds[name]) != 2:
            raise StructureError(f"@{fn.name} ^{name}: loop header must have two predecessors")
        if not isinstance(b.term, Br):
            raise StructureError(f"@{fn.name} ^{name}: loop header must end in br")
        latch = headers[name]
        loop = natural_loop(name, latch)
        t_in = b.term.then_target in loop
        e_in = b.term.else_target in loop
        if t_in == e_in:
            raise StructureError(f"@{fn.name} ^{name}: cannot split loop body from exit")
        if not t_in:
            raise StructureError(
                f"@{fn.name} ^{name}: loop body must sit on the taken branch edge"
            )
        body_entry, body_entry_args = b.term.then_target, b.term.then_args
        exit_name, exit_args = b.term.else_target, b.term.else_args
        if len(preds[exit_name]) != 1:
            raise StructureError(f"@{fn.name} ^{exit_name}: loop exit must have one predecessor")
        body_nodes, back_args = walk(body_entry, body_entry_args, True, name)
        param_ids = {vid for vid, _ in b.params}
        header_defs = {ins.result for ins in b.body}
        interior = region_uses(body_nodes) | set(back_args)
        canonical = (
            all(a in param_ids for a in exit_args)
            and not (header_defs & interior)
            and not (header_defs & set(body_entry_args))
        )
        node = SWhile(
            carried=list(b.params),
            init=init,
            header=list(b.body),
            cond=b.term.cond,
            body_region=body_nodes,
            body_args=back_args,
            exits=list(blocks[exit_name].params),
            exit_args=exit_args,
            canonical=canonical,
        )
        return node, exit_name

    def walk(
        entry_name: str,
        entry_args: tuple[int, ...],
        bind_entry: bool,
        stop: str | None,
    ) -> tuple[list, tuple[int, ...]]:
        nodes: list = []
        cur, args, bind = entry_name, entry_args, bind_entry
        while True:
            if cur == stop:
                return nodes, args
            b = blocks[cur]
            if cur in headers:
                if not bind:
                    raise StructureError(f"@{fn.name} ^{cur}: header reached oddly")
                node, exit_name = make_while(cur, args)
                nodes.append(node)
                cur, args, bind = exit_name, (), False
                continue
            if bind:
                if preds[cur] and len(preds[cur]) != 1:
                    raise StructureError(f"@{fn.name} ^{cur}: unstructured merge point")
                if b.params:
                    nodes.append(SCopy(list(zip((vid for vid, _ in b.params), args))))
            nodes.extend(SInstr(ins) for ins in b.body)
            t = b.term
            if isinstance(t, Ret):
                if stop is not None:
                    raise StructureError(f"@{fn.name} ^{cur}: ret inside a structured region")
                ret_box.append(t.values)
                return nodes, ()
            if isinstance(t, Jmp):
                cur, args, bind = t.target, t.args, True
                continue
            assert isinstance(t, Br)
            join = immediate_postdominator(pdom, cur)
            if join is None:
                raise StructureError(f"@{fn.name} ^{cur}: branch arms never reconverge")
            if len(preds[join]) != 2:
                raise StructureError(f"@{fn.name} ^{join}: join must have two predecessors")
            then_nodes, then_args = walk(t.then_target, t.then_args, True, join)
            else_nodes, else_args = walk(t.else_target, t.else_args, True, join)
            nodes.append(
                SIf(t.cond, then_nodes, then_args, else_nodes, else_args, list(blocks[join].params))
            )
            cur, args, bind = join, (), False

    region, _ = walk(entry, (), False, None)
    if not ret_box:
        raise StructureError(f"@{fn.name}: control never reaches ret")
    return SFunc(
        name=fn.name,
        params=list(fn.params),
        results=fn.results,
        region=region,
        ret_vals=ret_box[0],
        types=types,
        vnames=dict(fn.vnames),
        next_id=fn.next_id,
    )


# --------------------------------------------------------- emission


def flatten(sf: SFunc) -> Function:
    """Lower a structured tree to blocks in canonical shape."""
    fn = Function(sf.name, sf.results)
    fn.vnames = dict(sf.vnames)
    fn.next_id = sf.next_id
    counter = [0]

    def new_block(kind: str, params: list[tuple[int, Type]] | None = None) -> Block:
        name = "entry" if kind == "entry" else f"{kind}{counter[0]}"
        if kind != "entry":
            counter[0] += 1
        b = Block(name, params or [])
        fn.blocks.append(b)
        return b

    entry = new_block("entry", list(sf.params))

    def emit_region(nodes: list, cur: Block) -> Block:
        for node in nodes:
            if isinstance(node, SInstr):
                cur.body.append(node.ins)
            elif isinstance(node, SCopy):
                params = [(dst, sf.types[dst]) for dst, _ in node.pairs]
                nxt = new_block("b", params)
                cur.term = Jmp(nxt.name, tuple(src for _, src in node.pairs))
                cur = nxt
            elif isinstance(node, SIf):
                then_b = new_block("then")
                else_b = new_block("else")
                join_b = new_block("join", list(node.merged))
                cur.term = Br(node.cond, then_b.name, (), else_b.name, ())
                t_end = emit_region(node.then_region, then_b)
                t_end.term = Jmp(join_b.name, node.then_args)
                e_end = emit_region(node.else_region, else_b)
                e_end.term = Jmp(join_b.name, node.else_args)
                cur = join_b
            elif isinstance(node, SWhile):
                head_b = new_block("head", list(node.carried))
                body_b = new_block("body")
                exit_b = new_block("exit", list(node.exits))
                cur.term = Jmp(head_b.name, node.init)
                head_b.body.extend(node.header)
                head_b.term = Br(node.cond, body_b.name, (), exit_b.name, node.exit_args)
                b_end = emit_region(node.body_region, body_b)
                b_end.term = Jmp(head_b.name, node.body_args)
                cur = exit_b
            else:
                raise TypeError(f"unknown structured node {node!r}")
        return cur

    last = emit_region(sf.region, entry)
    last.term = Ret(sf.ret_vals)
    return fn


# ---------------------------------------------------------- building


class SEmitter:
    """Factory for building structured functions with typed values.

    Regions are managed as an explicit stack so transform code reads
    top to bottom: push a region, emit into it, pop it into an SIf or
    SWhile node.
    """

    def __init__(self, name: str, results: tuple[Type, ...], module: Module | None = None):
        self.name = name
        self.results = results
        self.module = module
        self.types: dict[int, Type] = {}
        self.vnames: dict[int, str] = {}
        self.next_id = 0
        self.params: list[tuple[int, Type]] = []
        self.stack: list[list] = [[]]
        self._used_names: set[str] = set()

    def fresh(self, name: str, ty: Type) -> int:
        base = name
        k = 1
        while name in self._used_names:
            name = f"{base}_{k}"
            k += 1
        self._used_names.add(name)
        vid = self.next_id
        self.next_id += 1
        self.vnames[vid] = name
        self.types[vid] = ty
        return vid

    def param(self, name: str, ty: Type) -> int:
        vid = self.fresh(name, ty)
        self.params.append((vid, ty))
        return vid

    # region management

    def push_region(self):
        self.stack.append([])

    def pop_region(self) -> list:
        return self.stack.pop()

    def append(self, node):
        self.stack[-1].append(node)

    # instruction emission

    def emit(
        self,
        op: str,
        operands: tuple[int, ...] = (),
        attrs: dict | None = None,
        name: str = "t",
    ) -> int:
        attrs = attrs or {}
        opnd_types = tuple(self.types[o] for o in operands)
        ty = result_type(op, opnd_types, attrs, self.module)
        vid = self.fresh(name, ty)
        self.append(SInstr(Instruction(vid, op, operands, attrs)))
        return vid

    def const_f64(self, x: float, name: str = "c") -> int:
        from .ir import F64
        return self.emit("const", (), {"ty": F64, "value": float(x)}, name)

    def const_i64(self, x: int, name: str = "c") -> int:
        from .ir import I64
        return self.emit("const", (), {"ty": I64, "value": int(x)}, name)

    def const_bool(self, x: bool, name: str = "c") -> int:
        from .ir import BOOL
        return self.emit("const", (), {"ty": BOOL, "value": bool(x)}, name)

    def const_tensor(self, shape: tuple[int, ...], values, name: str = "c") -> int:
        from .ir import tensor_type
        vals = tuple(float(v) for v in values)
        return self.emit("const", (), {"ty": tensor_type(*shape), "value": vals}, name)

    def zeros_like(self, ty: Type, name: str = "z") -> int:
        if ty.kind == "f64":
            return self.const_f64(0.0, name)
        if ty.is_tensor:
            n = 1
            for d in ty.shape:
                n *= d
            return self.const_tensor(ty.shape, (0.0,) * n, name)
        if ty.kind == "tape":
            return self.emit("tape_new", (), None, name)
        raise OpTypeError(f"no zero value for type {ty}")

    def finish(self, ret_vals: tuple[int, ...]) -> SFunc:
        assert len(self.stack) == 1, "unbalanced regions"
        return SFunc(
            name=self.name,
            params=self.params,
            results=self.results,
            region=self.stack[0],
            ret_vals=ret_vals,
            types=self.types,
            vnames=self.vnames,
            next_id=self.next_id,
        )


# ----------------------------------------------------------- splice


def splice_region(em: SEmitter, src: SFunc, nodes: list, valmap: dict[int, int],
                  expand_call=None):
    """Clone nodes into the emitter's open region, remapping values.

    ``valmap`` carries src value id -> emitter value id and gains the
    fresh ids of every cloned definition.  When ``expand_call`` is set,
    call instructions go through it (receiving the instruction and the
    remapped operands) instead of being cloned; it returns the value id
    standing in for the call result.  Shared by call inlining and
    derivative-wrapper assembly.
    """

    def m(v: int) -> int:
        return valmap[v]

    def name_of(v: int) -> str:
        return src.vnames.get(v, "t")

    for node in nodes:
        if isinstance(node, SInstr):
            ins = node.ins
            if expand_call is not None and ins.op == "call":
                valmap[ins.result] = expand_call(ins, tuple(m(o) for o in ins.operands))
                continue
            vid = em.fresh(name_of(ins.result), src.types[ins.result])
            valmap[ins.result] = vid
            em.append(SInstr(Instruction(vid, ins.op, tuple(m(o) for o in ins.operands),
                                         dict(ins.attrs))))
        elif isinstance(node, SCopy):
            # copies are pure renames; fold them into the map
            for dst, s in node.pairs:
                valmap[dst] = m(s)
        elif isinstance(node, SIf):
            em.push_region()
            splice_region(em, src, node.then_region, valmap, expand_call)
            then_nodes = em.pop_region()
            then_args = tuple(m(a) for a in node.then_args)
            em.push_region()
            splice_region(em, src, node.else_region, valmap, expand_call)
            else_nodes = em.pop_region()
            else_args = tuple(m(a) for a in node.else_args)
            merged = []
            for pv, pty in node.merged:
                nv = em.fresh(name_of(pv), pty)
                valmap[pv] = nv
                merged.append((nv, pty))
            em.append(SIf(m(node.cond), then_nodes, then_args, else_nodes, else_args, merged))
        elif isinstance(node, SWhile):
            init = tuple(m(a) for a in node.init)
            carried = []
            for pv, pty in node.carried:
                nv = em.fresh(name_of(pv), pty)
                valmap[pv] = nv
                carried.append((nv, pty))
            header = []
            for ins in node.header:
                vid = em.fresh(name_of(ins.result), src.types[ins.result])
                valmap[ins.result] = vid
                header.append(Instruction(vid, ins.op, tuple(m(o) for o in ins.operands),
                                          dict(ins.attrs)))
            em.push_region()
            splice_region(em, src, node.body_region, valmap, expand_call)
            body_nodes = em.pop_region()
            body_args = tuple(m(a) for a in node.body_args)
            exits = []
            exit_args = tuple(m(a) for a in node.exit_args)
            for pv, pty in node.exits:
                nv = em.fresh(name_of(pv), pty)
                valmap[pv] = nv
                exits.append((nv, pty))
            em.append(SWhile(carried, init, header, m(node.cond), body_nodes, body_args,
                             exits, exit_args, node.canonical))
        else:
            raise TypeError(f"unknown structured node {node!r}")


def splice_function(em: SEmitter, src: SFunc, args: tuple[int, ...],
                    expand_call=None) -> tuple[int, ...]:
    """Inline a whole structured function; returns its mapped ret values."""
    if len(args) != len(src.params):
        raise ValueError(f"@{src.name} takes {len(src.params)} args, got {len(args)}")
    valmap = {pv: a for (pv, _), a in zip(src.params, args)}
    splice_region(em, src, src.region, valmap, expand_call)
    return tuple(valmap[v] for v in src.ret_vals)
