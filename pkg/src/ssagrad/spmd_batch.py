"""Whole-function batching: run B independent inputs in one pass.

``vectorize`` rewrites a function so every parameter carries a leading
lane axis and every op works on all lanes at once.  Arithmetic stays
bit-identical per lane: elementwise kernels apply the same scalar
operations, reductions keep their fold order, and matmul becomes bmm
with the same ascending-k accumulation.

Control flow is where lanes disagree.  A branch on a lane-dependent
condition runs both sides and merges with masked selects; a loop keeps
an active-lane mask and iterates until every lane is done, freezing the
carried values of lanes that already left.  Traces survive both tricks
because they are persistent: a lane that did not take a branch simply
keeps its old trace value, and any speculative pushes on the other arm
are unreachable from it.

Partial ops need care under speculation: a masked-off lane may hold
values that were never meant to reach a divide or a log, so divisors
and log arguments are routed through selects that substitute 1.0 in
dead lanes.
"""

from __future__ import annotations

from .ir import (
    BOOL, F64, I64, TAPE, Function, Instruction, Module, Type,
    tapes_type, tensor_type,
)
from .ops import result_type
from .structure import (
    SCopy, SEmitter, SFunc, SIf, SInstr, SWhile, flatten,
)
from .reverse_ad import augment, inline_sfunc


class BatchError(Exception):
    pass


def batched_type(ty: Type, lanes: int) -> Type:
    """The lane-carrying version of a scalar program type.

    Counters and flags ride along as rows of floats so that lane-wise
    arithmetic and masking treat every value the same way.
    """
    if ty.kind in ("f64", "i64", "bool"):
        return tensor_type(lanes)
    if ty.kind == "tensor":
        return tensor_type(lanes, *ty.shape)
    if ty.kind == "tape":
        return tapes_type(lanes)
    raise BatchError(f"cannot batch a value of type {ty}")


def _lane_shape(ty: Type) -> tuple[int, ...]:
    return ty.shape if ty.kind == "tensor" else ()


def _broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    from .tensor import broadcast_shapes
    return broadcast_shapes(a, b)


# ----------------------------------------------------- lane analysis


def _scan_batched(sf: SFunc) -> set[int]:
    """Which values become lane-dependent once all parameters do.

    Constants and anything computed purely from them stay uniform and
    are emitted once, shared by every lane.  Traces always batch: the
    flags they replay are lane-dependent as soon as any branch is.
    """
    batched: set[int] = {pv for pv, _ in sf.params}

    def mark(vid: int, ty: Type) -> bool:
        if vid in batched:
            return False
        if ty.kind in ("tape", "tapes"):
            batched.add(vid)
            return True
        return False

    def instr(ins: Instruction, types: dict[int, Type]):
        if ins.op == "const":
            return
        ty = types[ins.result]
        if mark(ins.result, ty):
            return
        if any(o in batched for o in ins.operands):
            batched.add(ins.result)

    def walk(nodes: list):
        for node in nodes:
            if isinstance(node, SInstr):
                instr(node.ins, sf.types)
            elif isinstance(node, SCopy):
                for dst, src in node.pairs:
                    if src in batched:
                        batched.add(dst)
            elif isinstance(node, SIf):
                walk(node.then_region)
                walk(node.else_region)
                forced = node.cond in batched
                for (mv, mty), ta, ea in zip(node.merged, node.then_args, node.else_args):
                    if forced or ta in batched or ea in batched:
                        batched.add(mv)
                    else:
                        mark(mv, mty)
            elif isinstance(node, SWhile):
                while True:
                    before = len(batched)
                    forced = node.cond in batched
                    for (cv, cty), iv, bv in zip(node.carried, node.init, node.body_args):
                        if forced or iv in batched or bv in batched:
                            batched.add(cv)
                        else:
                            mark(cv, cty)
                    for ins in node.header:
                        instr(ins, sf.types)
                    walk(node.body_region)
                    if len(batched) == before:
                        break
                for (ev, ety), ea in zip(node.exits, node.exit_args):
                    if ea in batched:
                        batched.add(ev)
                    else:
                        mark(ev, ety)

    walk(sf.region)
    return batched


# --------------------------------------------------------- rewriting


class _Vectorizer:
    def __init__(self, module: Module, sf: SFunc, lanes: int, name: str):
        self.module = module
        self.sf = sf
        self.B = lanes
        self.batched = _scan_batched(sf)
        out = tuple(batched_type(t, lanes) for t in sf.results)
        self.em = SEmitter(name, out, module)
        self.vmap: dict[int, int] = {}
        # (B,) row of ones marking the lanes the current code runs for;
        # None at top level, where every lane is live
        self.mask: int | None = None
        self._ones: int | None = None

    # value plumbing

    def val(self, v: int) -> int:
        return self.vmap[v]

    def is_b(self, v: int) -> bool:
        return v in self.batched

    def name_of(self, v: int) -> str:
        return self.sf.vnames.get(v, "t")

    def lane_of(self, v: int) -> tuple[int, ...]:
        return _lane_shape(self.sf.types[v])

    def ones_rows(self) -> int:
        if self._ones is None:
            one = self.em.const_f64(1.0, "one")
            self._ones = self.em.emit("bcast", (one,), {"shape": (self.B,)}, "live")
        return self._ones

    def rows_like(self, fill: float, lane: tuple[int, ...], name: str) -> int:
        c = self.em.const_f64(fill, name)
        return self.em.emit("bcast", (c,), {"shape": (self.B, *lane)}, name)

    def pad_mask(self, mask: int, lane: tuple[int, ...]) -> int:
        if not lane:
            return mask
        shape = (self.B, *(1,) * len(lane))
        return self.em.emit("reshape", (mask,), {"shape": shape}, "m")

    def pad_lane(self, vid: int, lane: tuple[int, ...], rank: int) -> int:
        """Left-pad a batched value's lane with 1s so trailing axes align."""
        if len(lane) >= rank:
            return vid
        shape = (self.B, *(1,) * (rank - len(lane)), *lane)
        return self.em.emit("reshape", (vid,), {"shape": shape}, "t")

    def materialize(self, v: int) -> int:
        """The full lane-carrying form of a value, copying uniforms out."""
        if self.is_b(v):
            return self.val(v)
        ty = self.sf.types[v]
        ev = self.val(v)
        nm = self.name_of(v)
        if ty.kind == "f64":
            return self.em.emit("bcast", (ev,), {"shape": (self.B,)}, nm)
        if ty.kind == "tensor":
            return self.em.emit("bcast", (ev,), {"shape": (self.B, *ty.shape)}, nm)
        if ty.kind == "i64":
            f = self.em.emit("itof", (ev,), None, nm)
            return self.em.emit("bcast", (f,), {"shape": (self.B,)}, nm)
        if ty.kind == "bool":
            return self.em.emit(
                "select", (ev, self.ones_rows(), self.rows_like(0.0, (), nm)), None, nm
            )
        if ty.kind == "tape":
            return self.em.emit("tape_spread", (ev,), {"lanes": self.B}, nm)
        raise BatchError(f"cannot batch {ty}")

    # elementwise ops share one adaptation scheme: batched operands get
    # their lane axes aligned, uniform operands ride on broadcasting

    def common_lane(self, operands: tuple[int, ...]) -> tuple[int, ...]:
        s: tuple[int, ...] = ()
        for o in operands:
            s = _broadcast(s, self.lane_of(o) if self.is_b(o) else _lane_shape(self.sf.types[o]))
        return s

    def elem(self, o: int, lane: tuple[int, ...]) -> int:
        if not self.is_b(o):
            ev = self.val(o)
            if self.sf.types[o].kind == "i64":
                # uniform counters join lane arithmetic as plain floats
                ev = self.em.emit("itof", (ev,), None, self.name_of(o))
            return ev
        return self.pad_lane(self.val(o), self.lane_of(o), len(lane))

    def guard(self, src: int, vid: int) -> int:
        """Substitute 1.0 in dead lanes so partial ops cannot fault."""
        if self.mask is None:
            return vid
        if self.is_b(src):
            lane = self.lane_of(src)
            m = self.pad_mask(self.mask, lane)
            return self.em.emit("select", (m, vid, self.rows_like(1.0, lane, "safe")), None, "safe")
        total = self.em.emit("reduce_sum", (self.mask,), {"axis": "all"}, "nlive")
        alive = self.em.emit("gt", (total, self.em.const_f64(0.0, "z")), None, "alive")
        ty = self.sf.types[src]
        if ty.kind == "tensor":
            one = self.em.zeros_like(ty, "safe")
            one = self.em.emit("add", (one, self.em.const_f64(1.0, "one")), None, "safe")
        else:
            one = self.em.const_f64(1.0, "one")
        return self.em.emit("select", (alive, vid, one), None, "safe")

    # ------------------------------------------------------- op cases

    def instr(self, ins: Instruction):
        sf, em = self.sf, self.em
        op, res = ins.op, ins.result
        nm = self.name_of(res)

        if op == "const":
            self.vmap[res] = em.emit("const", (), dict(ins.attrs), nm)
            return

        if not self.is_b(res):
            # uniform island: clone as is, but partial ops still need a
            # live-lane guard when speculated under a mask
            opnds = []
            for i, o in enumerate(ins.operands):
                ev = self.val(o)
                if (op == "div" and i == 1) or (op == "log" and i == 0):
                    ev = self.guard(o, ev)
                opnds.append(ev)
            self.vmap[res] = em.emit(op, tuple(opnds), dict(ins.attrs), nm)
            return

        if op in ("add", "sub", "mul", "div", "neg", "exp", "log", "tanh",
                  "sigmoid", "relu", "pow_int", "lt", "gt", "eq"):
            lane = self.common_lane(ins.operands)
            opnds = []
            for i, o in enumerate(ins.operands):
                ev = self.elem(o, lane)
                if (op == "div" and i == 1) or (op == "log" and i == 0):
                    ev = self.guard(o, ev)
                opnds.append(ev)
            self.vmap[res] = em.emit(op, tuple(opnds), dict(ins.attrs), nm)
            return

        if op == "select":
            self.select(ins)
            return
        if op == "itof":
            # batched counters already live as rows of floats
            self.vmap[res] = self.val(ins.operands[0])
            return
        if op == "matmul":
            a, b = ins.operands
            av = self.val(a) if self.is_b(a) else em.emit(
                "bcast", (self.val(a),), {"shape": (self.B, *sf.types[a].shape)}, nm)
            bv = self.val(b) if self.is_b(b) else em.emit(
                "bcast", (self.val(b),), {"shape": (self.B, *sf.types[b].shape)}, nm)
            self.vmap[res] = em.emit("bmm", (av, bv), None, nm)
            return
        if op == "bmm":
            raise BatchError("bmm is already lane-shaped; batching it again needs rank 4")
        if op == "transpose":
            # lanes lead, so swapping the trailing two axes is untouched
            self.vmap[res] = em.emit("transpose", (self.val(ins.operands[0]),), None, nm)
            return
        if op == "reshape":
            self.vmap[res] = em.emit(
                "reshape", (self.val(ins.operands[0]),),
                {"shape": (self.B, *ins.attrs["shape"])}, nm)
            return
        if op == "reduce_sum":
            self.reduce_sum(ins)
            return
        if op == "bcast":
            (o,) = ins.operands
            shape = ins.attrs["shape"]
            v = self.pad_lane(self.val(o), self.lane_of(o), len(shape))
            self.vmap[res] = em.emit("bcast", (v,), {"shape": (self.B, *shape)}, nm)
            return
        if op == "reduce_to":
            self.reduce_to(ins)
            return
        if op == "stack":
            axis = ins.attrs.get("axis", 0)
            vals = tuple(self.materialize(o) for o in ins.operands)
            self.vmap[res] = em.emit("stack", vals, {"axis": axis + 1}, nm)
            return
        if op == "unstack":
            self.vmap[res] = em.emit(
                "unstack", (self.val(ins.operands[0]),),
                {"index": ins.attrs["index"], "axis": ins.attrs.get("axis", 0) + 1}, nm)
            return
        if op in ("fused_map", "fused_pack"):
            lane = self.common_lane(ins.operands)
            opnds = tuple(self.elem(o, lane) for o in ins.operands)
            if op == "fused_map":
                self.vmap[res] = em.emit("fused_map", opnds, dict(ins.attrs), nm)
                return
            if lane:
                raise BatchError("derivative packs over tensors do not batch")
            packed = em.emit("fused_pack", opnds, dict(ins.attrs), nm)
            # the pack axis comes out first; lanes must lead for the trace
            self.vmap[res] = em.emit("transpose", (packed,), None, nm)
            return
        if op == "call":
            raise BatchError("calls are inlined before batching")

        if op == "tape_new":
            t = em.emit("tape_new", (), None, nm)
            self.vmap[res] = em.emit("tape_spread", (t,), {"lanes": self.B}, nm)
            return
        if op == "tape_push":
            t, v = ins.operands
            if self.is_b(v):
                self.vmap[res] = em.emit(
                    "tape_push", (self.val(t), self.val(v)), {"per_lane": True}, nm)
            else:
                self.vmap[res] = em.emit("tape_push", (self.val(t), self.val(v)), None, nm)
            return
        if op == "tape_top":
            ty = batched_type(ins.attrs["ty"], self.B)
            self.vmap[res] = em.emit(
                "tape_top", (self.val(ins.operands[0]),), {"ty": ty, "per_lane": True}, nm)
            return
        if op == "tape_rest":
            self.vmap[res] = em.emit("tape_rest", (self.val(ins.operands[0]),), None, nm)
            return
        if op == "tape_expect_empty":
            self.vmap[res] = em.emit("tape_expect_empty", (self.val(ins.operands[0]),), None, nm)
            return
        if op == "tape_spread":
            raise BatchError("tape_spread input is already per-lane")

        raise BatchError(f"op '{op}' has no batching rule")

    def select(self, ins: Instruction):
        sf, em = self.sf, self.em
        c, a, b = ins.operands
        nm = self.name_of(ins.result)
        arm_ty = sf.types[a]

        if arm_ty.kind == "tape":
            self.vmap[ins.result] = em.emit(
                "select", (self.val(c), self.val(a), self.val(b)), None, nm)
            return

        if not self.is_b(c):
            # uniform condition over lane-dependent arms; a plain select
            # wants both arms at exactly the same type
            lane = self.common_lane((a, b))
            target = (self.B, *lane)

            def lift(v: int) -> int:
                ev = self.materialize(v)
                s = self.lane_of(v) if self.is_b(v) else _lane_shape(sf.types[v])
                if s != lane:
                    ev = self.pad_lane(ev, s, len(lane))
                    ev = em.emit("bcast", (ev,), {"shape": target}, nm)
                return ev

            self.vmap[ins.result] = em.emit(
                "select", (self.val(c), lift(a), lift(b)), None, nm)
            return

        lane = self.common_lane(ins.operands)
        cv = self.elem(c, lane)
        av = self.elem(a, lane)
        bv = self.elem(b, lane)
        self.vmap[ins.result] = em.emit("select", (cv, av, bv), None, nm)
        return

    def reduce_sum(self, ins: Instruction):
        em = self.em
        (o,) = ins.operands
        axis = ins.attrs.get("axis", "all")
        lane = self.lane_of(o)
        v = self.val(o)
        nm = self.name_of(ins.result)

        if axis == "all":
            # per-lane full fold, leading axis preserved
            self.vmap[ins.result] = em.emit("reduce_sum", (v,), {"axis": "tail"}, nm)
            return
        if axis == "tail":
            # fold every lane axis after the first, in the same order
            for _ in range(max(len(lane) - 1, 0)):
                v = em.emit("reduce_sum", (v,), {"axis": 2}, nm)
            self.vmap[ins.result] = v
            return
        ax = int(axis)
        if len(lane) == 1:
            self.vmap[ins.result] = em.emit("reduce_sum", (v,), {"axis": 1}, nm)
            return
        self.vmap[ins.result] = em.emit("reduce_sum", (v,), {"axis": ax + 1}, nm)

    def reduce_to(self, ins: Instruction):
        em = self.em
        (o,) = ins.operands
        shape = ins.attrs["shape"]
        lane = list(self.lane_of(o))
        v = self.val(o)
        nm = self.name_of(ins.result)

        while len(lane) > max(len(shape), 1):
            v = em.emit("reduce_sum", (v,), {"axis": 1}, nm)
            lane.pop(0)
        if not shape:
            self.vmap[ins.result] = em.emit("reduce_sum", (v,), {"axis": 1}, nm)
            return
        for ax in range(len(shape)):
            if shape[ax] == 1 and lane[ax] != 1:
                v = em.emit("reduce_sum", (v,), {"axis": ax + 1}, nm)
                lane[ax] = 1
                v = em.emit("reshape", (v,), {"shape": (self.B, *lane)}, nm)
        self.vmap[ins.result] = v

    # --------------------------------------------------- control flow

    def walk(self, nodes: list):
        for node in nodes:
            if isinstance(node, SInstr):
                self.instr(node.ins)
            elif isinstance(node, SCopy):
                for dst, src in node.pairs:
                    self.vmap[dst] = self.val(src)
            elif isinstance(node, SIf):
                self.branch(node)
            elif isinstance(node, SWhile):
                self.loop(node)
            else:
                raise TypeError(f"unknown structured node {node!r}")

    def branch(self, node: SIf):
        em = self.em
        if not self.is_b(node.cond):
            # all lanes agree: keep a real branch
            arm_regions, arm_args = [], []
            for region, args in ((node.then_region, node.then_args),
                                 (node.else_region, node.else_args)):
                em.push_region()
                self.walk(region)
                outs = []
                for (mv, mty), a in zip(node.merged, args):
                    if self.is_b(mv) and not self.is_b(a):
                        outs.append(self.materialize(a))
                    else:
                        outs.append(self.val(a))
                arm_regions.append(em.pop_region())
                arm_args.append(tuple(outs))
            merged = []
            for mv, mty in node.merged:
                ty = batched_type(mty, self.B) if self.is_b(mv) else mty
                nv = em.fresh(self.name_of(mv), ty)
                self.vmap[mv] = nv
                merged.append((nv, ty))
            em.append(SIf(self.val(node.cond), arm_regions[0], arm_args[0],
                          arm_regions[1], arm_args[1], merged))
            return

        # lanes disagree: run both sides inline and merge with selects
        m = self.val(node.cond)
        outer = self.mask
        enc = outer if outer is not None else self.ones_rows()
        inv = em.emit("sub", (self.ones_rows(), m), None, "notm")

        self.mask = em.emit("mul", (enc, m), None, "tm")
        self.walk(node.then_region)
        then_vals = [self.val(a) if self.is_b(a) or not self.is_b(mv) else self.materialize(a)
                     for (mv, _), a in zip(node.merged, node.then_args)]

        self.mask = em.emit("mul", (enc, inv), None, "em")
        self.walk(node.else_region)
        else_vals = [self.val(a) if self.is_b(a) or not self.is_b(mv) else self.materialize(a)
                     for (mv, _), a in zip(node.merged, node.else_args)]

        self.mask = outer
        for (mv, mty), tv, ev in zip(node.merged, then_vals, else_vals):
            nm = self.name_of(mv)
            if mty.kind == "tape":
                self.vmap[mv] = em.emit("select", (m, tv, ev), None, nm)
                continue
            lane = _lane_shape(mty)
            self.vmap[mv] = em.emit(
                "select", (self.pad_mask(m, lane), tv, ev), None, nm)

    def loop(self, node: SWhile):
        em, sf = self.em, self.sf
        if not self.is_b(node.cond):
            self.uniform_loop(node)
            return
        if any(ins.op.startswith("tape_") for ins in node.header):
            raise BatchError("trace traffic in a lane-varying loop header")

        outer = self.mask
        enc = outer if outer is not None else self.ones_rows()

        inits = [enc]
        carried = [(em.fresh("active", tensor_type(self.B)), tensor_type(self.B))]
        for (cv, cty), iv in zip(node.carried, node.init):
            bty = batched_type(cty, self.B)
            inits.append(self.materialize(iv))
            p = em.fresh(self.name_of(cv), bty)
            self.vmap[cv] = p
            carried.append((p, bty))
        active = carried[0][0]

        # exit values that name a header result need their own frozen
        # slot: the joint loop keeps evaluating the header after a lane
        # has left, so the lane's own final evaluation must be captured
        header_ids = {ins.result for ins in node.header}
        frozen: dict[int, int] = {}
        for (ev, ety), ea in zip(node.exits, node.exit_args):
            if ea in header_ids and ea not in frozen:
                bty = batched_type(ety, self.B)
                inits.append(self.em.zeros_like(bty, "fz"))
                p = em.fresh("fz", bty)
                frozen[ea] = p
                carried.append((p, bty))

        em.push_region()
        self.mask = active
        for ins in node.header:
            self.instr(ins)
        m = self.val(node.cond)
        act = em.emit("mul", (active, m), None, "act")
        total = em.emit("reduce_sum", (act,), {"axis": "all"}, "nlive")
        cond = em.emit("gt", (total, em.const_f64(0.0, "z")), None, "more")
        frozen_now: dict[int, int] = {}
        for ea, p in frozen.items():
            lane = self.lane_of(ea)
            hv = self.materialize(ea)
            frozen_now[ea] = em.emit(
                "select", (self.pad_mask(active, lane), hv, p), None, "fz")
        header_nodes = em.pop_region()
        header_ins = [n.ins for n in header_nodes]

        em.push_region()
        self.mask = act
        self.walk(node.body_region)
        back = [act]
        for (cv, cty), ba in zip(node.carried, node.body_args):
            p = self.val(cv)
            nv = self.materialize(ba)
            if cty.kind == "tape":
                back.append(em.emit("select", (act, nv, p), None, self.name_of(cv)))
            else:
                lane = _lane_shape(cty)
                back.append(em.emit(
                    "select", (self.pad_mask(act, lane), nv, p), None, self.name_of(cv)))
        back.extend(frozen_now[ea] for ea in frozen)
        body_nodes = em.pop_region()
        self.mask = outer

        exits = []
        exit_args = []
        slot_of = {cv: i + 1 for i, (cv, _) in enumerate(node.carried)}
        for (ev, ety), ea in zip(node.exits, node.exit_args):
            bty = batched_type(ety, self.B)
            nv = em.fresh(self.name_of(ev), bty)
            exits.append((nv, bty))
            if ea in frozen:
                exit_args.append(frozen_now[ea])
            elif ea in slot_of:
                exit_args.append(carried[slot_of[ea]][0])
            else:
                exit_args.append(self.materialize(ea))
            self.vmap[ev] = nv
            self.batched.add(ev)
        em.append(SWhile(carried, tuple(inits), header_ins, cond, body_nodes,
                         tuple(back), exits, tuple(exit_args), False))

    def uniform_loop(self, node: SWhile):
        """Same trip count in every lane: the loop shape survives as is."""
        em, sf = self.em, self.sf
        inits = []
        carried = []
        for (cv, cty), iv in zip(node.carried, node.init):
            if self.is_b(cv):
                ty = batched_type(cty, self.B)
                inits.append(self.materialize(iv))
            else:
                ty = cty
                inits.append(self.val(iv))
            p = em.fresh(self.name_of(cv), ty)
            self.vmap[cv] = p
            carried.append((p, ty))

        em.push_region()
        for ins in node.header:
            self.instr(ins)
        header_nodes = em.pop_region()
        header_ins = [n.ins for n in header_nodes]
        cond = self.val(node.cond)

        em.push_region()
        self.walk(node.body_region)
        back = []
        for (cv, cty), ba in zip(node.carried, node.body_args):
            if self.is_b(cv) and not self.is_b(ba):
                back.append(self.materialize(ba))
            else:
                back.append(self.val(ba))
        body_nodes = em.pop_region()

        exits = []
        exit_args = []
        for (ev, ety), ea in zip(node.exits, node.exit_args):
            ty = batched_type(ety, self.B) if self.is_b(ev) else ety
            nv = em.fresh(self.name_of(ev), ty)
            exits.append((nv, ty))
            if self.is_b(ev) and not self.is_b(ea):
                exit_args.append(self.materialize(ea))
            else:
                exit_args.append(self.val(ea))
            self.vmap[ev] = nv
        em.append(SWhile(carried, tuple(inits), header_ins, cond, body_nodes,
                         tuple(back), exits, tuple(exit_args), False))

    # ----------------------------------------------------------- entry

    def build(self) -> SFunc:
        em, sf = self.em, self.sf
        for pv, ty in sf.params:
            self.vmap[pv] = em.param(self.name_of(pv), batched_type(ty, self.B))
        # the all-live row is shared across regions, so pin it at the top
        self.ones_rows()
        self.walk(sf.region)
        rets = tuple(self.materialize(rv) for rv in sf.ret_vals)
        return em.finish(rets)


def vectorize(module: Module, name: str, lanes: int) -> Function:
    """Rewrite @name so it runs ``lanes`` independent inputs at once.

    The result @name__batched_B{lanes} takes every parameter with a
    leading lane axis and returns per-lane rows for every result; per
    lane the arithmetic is exactly the scalar program's.
    """
    if lanes < 1:
        raise BatchError("lane count must be positive")
    bname = f"{name}__batched_B{lanes}"
    if bname in module.functions:
        return module.get(bname)
    fn = module.get(name)
    sf = inline_sfunc(module, fn)
    out = flatten(_Vectorizer(module, sf, lanes, bname).build())
    module.add(out)
    return out


# --------------------------------------------------- lane marshalling


def stack_lanes(ty: Type, vals: list):
    """Pack per-sample runtime values into one lane-leading argument."""
    from . import tensor as T
    from .tensor import DenseTensor

    if ty.kind == "tensor":
        return T.stack([v for v in vals], 0)
    if ty.kind == "bool":
        return DenseTensor.from_flat((len(vals),), [1.0 if v else 0.0 for v in vals])
    return DenseTensor.from_flat((len(vals),), [float(v) for v in vals])


def unstack_lanes(ty: Type, value, lanes: int) -> list:
    """Split a lane-leading result back into per-sample values."""
    from . import tensor as T

    out = []
    for i in range(lanes):
        v = T.take(value, i, 0)
        if ty.kind == "bool":
            out.append(v != 0.0)
        elif ty.kind == "i64":
            out.append(int(v))
        else:
            out.append(v)
    return out


def batched_grad(module: Module, name: str, lanes: int, stacked_args: tuple,
                 seeds: tuple, step_limit: int | None = None) -> dict[int, object]:
    """Per-lane gradients in one batched forward and one batched pullback.

    ``stacked_args`` and ``seeds`` carry a leading lane axis.  Returns
    the same mapping as ``grad`` with each cotangent holding all lanes.
    """
    from .interp import DEFAULT_STEP_LIMIT, Machine

    fn = module.get(name)
    aug_fn, pb_fn = augment(module, name)
    vaug = vectorize(module, aug_fn.name, lanes)
    vpb = vectorize(module, pb_fn.name, lanes)

    machine = Machine(module, step_limit or DEFAULT_STEP_LIMIT)
    outs = machine.call(vaug.name, tuple(stacked_args))
    nres = len(fn.results)
    blog, vstack = outs[nres], outs[nres + 1]
    cots = machine.call(vpb.name, (blog, vstack) + tuple(seeds))
    out: dict[int, object] = {}
    i = 0
    for pv, ty in fn.params:
        if ty.is_differentiable:
            out[pv] = cots[i]
            i += 1
    return out
