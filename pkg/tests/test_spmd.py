import random

import pytest

from ssagrad import (BatchError, DenseTensor, batched_grad, eval_function,
                     grad, stack_lanes, unstack_lanes, vectorize, verify)
from ssagrad.ir import BOOL, F64, I64, tensor_type

from conftest import max_rel


def run_lanes(module, name, lanes, per_lane_args):
    fn = module.get(name)
    bfn = vectorize(module, name, lanes)
    stacked = tuple(
        stack_lanes(ty, [la[i] for la in per_lane_args])
        for i, (_, ty) in enumerate(fn.params)
    )
    out = eval_function(module, bfn.name, stacked)
    return [
        unstack_lanes(ty, out[i], lanes) for i, ty in enumerate(fn.results)
    ]


def test_divergent_branch_lanes(analytic):
    lanes = [(-1.0,), (2.0,), (-3.0,)]
    (col,) = run_lanes(analytic, "absval", 3, lanes)
    assert col == [1.0, 2.0, 3.0]


def test_per_lane_trip_counts(analytic):
    lanes = [(2.0, 0), (2.0, 3), (2.0, 8)]
    (col,) = run_lanes(analytic, "powloop", 3, lanes)
    assert col == [1.0, 8.0, 256.0]


def test_single_lane_degenerate(analytic):
    (col,) = run_lanes(analytic, "cube", 1, [(1.5,)])
    assert col == [eval_function(analytic, "cube", (1.5,))[0]]


def test_lanes_match_map_exactly(analytic):
    # tolerance 0: the batched compiled code must reproduce the scalar
    # interpreter bit for bit
    rng = random.Random(3)
    for name in ("prod", "cube", "absval", "callin"):
        fn = analytic.get(name)
        for lanes in (1, 3, 8):
            per = [
                tuple(rng.uniform(-2, 2) for _ in fn.params)
                for _ in range(lanes)
            ]
            cols = run_lanes(analytic, name, lanes, per)
            for i in range(lanes):
                want = eval_function(analytic, name, per[i])
                assert tuple(col[i] for col in cols) == want


def test_tensor_args_batch(analytic):
    rng = random.Random(4)
    per = []
    for _ in range(3):
        w = DenseTensor.from_flat((2, 3), [rng.uniform(-1, 1) for _ in range(6)])
        v = DenseTensor.from_flat((3, 1), [rng.uniform(-1, 1) for _ in range(3)])
        per.append((w, v))
    (col,) = run_lanes(analytic, "net", 3, per)
    for i in range(3):
        assert col[i] == eval_function(analytic, "net", per[i])[0]


def test_vectorize_caches(analytic):
    a = vectorize(analytic, "prod", 3)
    b = vectorize(analytic, "prod", 3)
    assert a is b
    c = vectorize(analytic, "prod", 8)
    assert c is not a


def test_vectorized_module_verifies(analytic):
    for name in ("prod", "cube", "absval", "powloop", "net"):
        for lanes in (1, 3, 8):
            vectorize(analytic, name, lanes)
    assert verify(analytic) == []


def test_stack_unstack_round_trip():
    vals = [1.5, -2.0, 0.25]
    s = stack_lanes(F64, vals)
    assert s.shape == (3,)
    assert unstack_lanes(F64, s, 3) == vals

    bvals = [True, False, True]
    sb = stack_lanes(BOOL, bvals)
    assert unstack_lanes(BOOL, sb, 3) == bvals

    ivals = [4, 0, -2]
    si = stack_lanes(I64, ivals)
    back = unstack_lanes(I64, si, 3)
    assert back == ivals and all(isinstance(v, int) for v in back)

    ty = tensor_type(2)
    ts = [DenseTensor.from_flat((2,), [i, i + 1]) for i in range(3)]
    st = stack_lanes(ty, ts)
    assert st.shape == (3, 2)
    assert [t.flat() for t in unstack_lanes(ty, st, 3)] == [t.flat() for t in ts]


def test_batched_grad_matches_per_sample(analytic):
    rng = random.Random(5)
    for name in ("prod", "cube", "absval"):
        fn = analytic.get(name)
        lanes = 4
        per = [
            tuple(rng.uniform(-2, 2) for _ in fn.params) for _ in range(lanes)
        ]
        stacked = tuple(
            stack_lanes(ty, [la[i] for la in per])
            for i, (_, ty) in enumerate(fn.params)
        )
        seeds = (stack_lanes(F64, [1.0] * lanes),)
        bg = batched_grad(analytic, name, lanes, stacked, seeds)
        for i in range(lanes):
            g = grad(analytic, name, per[i])
            for vid in g:
                got = unstack_lanes(F64, bg[vid], lanes)[i]
                assert max_rel(got, g[vid]) < 1e-12


def test_batched_grad_divergent_trips(analytic):
    lanes = [(1.1, 1), (1.1, 4), (1.1, 8)]
    stacked = (stack_lanes(F64, [la[0] for la in lanes]),
               stack_lanes(I64, [la[1] for la in lanes]))
    seeds = (stack_lanes(F64, [1.0, 1.0, 1.0]),)
    bg = batched_grad(analytic, "powloop", 3, stacked, seeds)
    per = unstack_lanes(F64, bg[0], 3)
    for i, (x, n) in enumerate(lanes):
        assert max_rel(per[i], n * x ** (n - 1)) < 1e-12


def test_lane_count_positive(analytic):
    with pytest.raises(BatchError):
        vectorize(analytic, "prod", 0)


def test_batched_type_mapping():
    from ssagrad.spmd_batch import batched_type
    from ssagrad.ir import TAPE, tapes_type
    assert batched_type(F64, 3) == tensor_type(3)
    assert batched_type(tensor_type(2), 3) == tensor_type(3, 2)
    assert batched_type(TAPE, 3) == tapes_type(3)
    with pytest.raises(BatchError):
        batched_type(tapes_type(2), 3)
