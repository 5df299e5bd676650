"""Forward-mode evaluation of scalar subfunctions.

A Dual carries a primal float and a k-wide tangent row.  Seeding the
arguments with identity rows and running once yields the value plus
all k partial derivatives; fused_pack stores these as rows of one
tensor so the reverse pass can contract against them later.

Primal arithmetic goes through the same scalar kernels the reference
evaluator uses, in the same order, so the primal row of a pack is
bit-identical to a plain fused_map evaluation.
"""

from __future__ import annotations

from . import tensor as T
from .ir import Function, Module
from .interp import DEFAULT_STEP_LIMIT, Machine, run_blocks, _spread_flat
from .rules import NUMERIC
from .tensor import DenseTensor, DomainError

import math


class Dual:
    __slots__ = ("p", "t")

    def __init__(self, p: float, t: tuple[float, ...]):
        self.p = p
        self.t = t

    def __repr__(self):
        return f"Dual({self.p!r}, {self.t!r})"


def _lift(v, k: int) -> Dual:
    if isinstance(v, Dual):
        return v
    return Dual(float(v), (0.0,) * k)


def _prim(v):
    return v.p if isinstance(v, Dual) else v


class _DualRunner:
    """Op dispatch over Duals; ints and bools pass through untouched."""

    def __init__(self, module: Module, budget: list[int], k: int):
        self.module = module
        self.budget = budget
        self.k = k

    def call(self, fn: Function, args: tuple) -> tuple:
        return run_blocks(fn, args, self.dispatch, self.budget)

    def dispatch(self, ins, env):
        op = ins.op
        a = ins.operands
        k = self.k

        if op == "const":
            ty = ins.attrs["ty"]
            v = ins.attrs["value"]
            if ty.kind == "f64":
                return Dual(float(v), (0.0,) * k)
            if ty.kind == "i64":
                return int(v)
            if ty.kind == "bool":
                return bool(v)
            raise DomainError(f"{ty} constant in scalar code")

        if op in ("add", "sub", "mul"):
            x, y = env[a[0]], env[a[1]]
            if isinstance(x, int) and isinstance(y, int):
                return {"add": x + y, "sub": x - y, "mul": x * y}[op]
            x, y = _lift(x, k), _lift(y, k)
            if op == "add":
                return Dual(x.p + y.p, tuple(s + t for s, t in zip(x.t, y.t)))
            if op == "sub":
                return Dual(x.p - y.p, tuple(s - t for s, t in zip(x.t, y.t)))
            return Dual(x.p * y.p, tuple(s * y.p + x.p * t for s, t in zip(x.t, y.t)))

        if op == "div":
            x, y = _lift(env[a[0]], k), _lift(env[a[1]], k)
            if y.p == 0.0:
                raise DomainError("division by zero")
            p = x.p / y.p
            return Dual(p, tuple((s - p * t) / y.p for s, t in zip(x.t, y.t)))

        if op == "neg":
            x = env[a[0]]
            if isinstance(x, int):
                return -x
            return Dual(-x.p, tuple(-t for t in x.t))

        if op == "exp":
            x = env[a[0]]
            y = math.exp(x.p)
            return Dual(y, tuple(y * t for t in x.t))
        if op == "log":
            x = env[a[0]]
            y = T.scalar_log(x.p)
            return Dual(y, tuple(t / x.p for t in x.t))
        if op == "tanh":
            x = env[a[0]]
            y = math.tanh(x.p)
            d = 1.0 - y * y
            return Dual(y, tuple(d * t for t in x.t))
        if op == "sigmoid":
            x = env[a[0]]
            y = T.scalar_sigmoid(x.p)
            d = y * (1.0 - y)
            return Dual(y, tuple(d * t for t in x.t))
        if op == "relu":
            # derivative at exactly zero is taken as zero
            x = env[a[0]]
            d = 1.0 if x.p > 0.0 else 0.0
            return Dual(T.scalar_relu(x.p), tuple(d * t for t in x.t))
        if op == "pow_int":
            x = env[a[0]]
            n = ins.attrs["n"]
            y = T.scalar_pow_int(x.p, n)
            if n == 0:
                return Dual(y, (0.0,) * k)
            d = float(n) * T.scalar_pow_int(x.p, n - 1)
            return Dual(y, tuple(d * t for t in x.t))

        if op == "itof":
            return Dual(float(env[a[0]]), (0.0,) * k)

        if op in ("lt", "gt", "eq"):
            x, y = _prim(env[a[0]]), _prim(env[a[1]])
            if op == "lt":
                return x < y
            if op == "gt":
                return x > y
            return x == y

        if op == "select":
            c = env[a[0]]
            if not isinstance(c, bool):
                raise DomainError("select over a mask in scalar code")
            return env[a[1]] if c else env[a[2]]

        if op == "call":
            callee = self.module.get(ins.attrs["fn"].name)
            return self.call(callee, tuple(env[o] for o in a))[0]

        raise DomainError(f"op '{op}' is not scalar; forward mode runs scalar code only")


def _check_scalar_fn(fn: Function):
    if len(fn.results) != 1 or fn.results[0].kind != "f64":
        raise ValueError(f"@{fn.name} must return a single f64")
    for _, ty in fn.params:
        if ty.kind != "f64":
            raise ValueError(f"@{fn.name} takes a non-f64 parameter")


def dual_eval(
    module: Module,
    name: str,
    args,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> Dual:
    """Run a scalar function on Dual arguments (floats get zero rows)."""
    fn = module.get(name)
    _check_scalar_fn(fn)
    widths = {len(v.t) for v in args if isinstance(v, Dual)}
    if len(widths) > 1:
        raise ValueError(f"mixed tangent widths {sorted(widths)}")
    k = widths.pop() if widths else 0
    runner = _DualRunner(module, [step_limit], k)
    out = runner.call(fn, tuple(_lift(v, k) for v in args))
    return _lift(out[0], k)


def pack_rows(machine: Machine, fn: Function, args: tuple) -> list[float]:
    """Value and all partials of a scalar function at one point.

    Returns 1+k floats: the primal followed by d/d(arg i) for each i.
    Draws on the calling machine's step budget.
    """
    k = len(args)
    seeded = tuple(
        Dual(float(v), tuple(1.0 if j == i else 0.0 for j in range(k)))
        for i, v in enumerate(args)
    )
    runner = _DualRunner(machine.module, machine.budget, k)
    out = runner.call(fn, seeded)[0]
    return [out.p, *out.t]


def fused_map_with_partials(
    module: Module,
    name: str,
    args,
    step_limit: int = DEFAULT_STEP_LIMIT,
):
    """Elementwise map of a scalar function plus per-element partials.

    Arguments broadcast like fused_map.  Returns (primal, partials)
    where partials[i] has the output shape and holds d out/d arg_i at
    every element.  All-scalar arguments give plain floats back.
    """
    fn = module.get(name)
    _check_scalar_fn(fn)
    if len(args) != len(fn.params):
        raise ValueError(f"@{fn.name} takes {len(fn.params)} arguments, got {len(args)}")
    machine = Machine(module, step_limit)
    k = len(args)
    shape: tuple[int, ...] = ()
    for v in args:
        if isinstance(v, DenseTensor):
            shape = T.broadcast_shapes(shape, v.shape)
    if not shape:
        rows = pack_rows(machine, fn, tuple(float(v) for v in args))
        return rows[0], rows[1:]
    flat = [_spread_flat(v, shape) for v in args]
    cols = [pack_rows(machine, fn, tuple(col[i] for col in flat)) for i in range(len(flat[0]))]
    primal = DenseTensor.from_flat(shape, [c[0] for c in cols])
    partials = [DenseTensor.from_flat(shape, [c[1 + i] for c in cols]) for i in range(k)]
    return primal, partials


def fused_map_pullback(partials, arg_types, ybar):
    """Contract a result cotangent against saved partials.

    arg_types are the operand Types; broadcast axes fold back down so
    each cotangent matches its operand.
    """
    return tuple(
        NUMERIC.reduce_like(T.mul(ybar, part), ty)
        for part, ty in zip(partials, arg_types)
    )
