import json

import pytest

from ssagrad import parse_ir, print_ir, verify
from ssagrad.cli import main

from conftest import ANALYTIC_SRC

MUL_SRC = """
func @mul(%x: f64, %y: f64) -> f64 {
^entry:
  %r = mul %x, %y
  ret %r
}
"""

ABS_SRC = """
func @absval(%x: f64) -> f64 {
^entry:
  %z = const f64 0.0
  %pos = gt %x, %z
  br %pos, ^a(), ^b()
^a:
  jmp ^join(%x)
^b:
  %nx = neg %x
  jmp ^join(%nx)
^join(%v: f64):
  ret %v
}
"""


@pytest.fixture
def mul_file(tmp_path):
    p = tmp_path / "mul.ssair"
    p.write_text(MUL_SRC)
    return str(p)


@pytest.fixture
def abs_file(tmp_path):
    p = tmp_path / "absval.ssair"
    p.write_text(ABS_SRC)
    return str(p)


@pytest.fixture
def analytic_file(tmp_path):
    p = tmp_path / "analytic.ssair"
    p.write_text(ANALYTIC_SRC)
    return str(p)


def test_run(mul_file, capsys):
    assert main(["run", mul_file, "--entry", "mul", "--args", "[3,2]"]) == 0
    out, err = capsys.readouterr()
    assert json.loads(out) == 6.0
    assert err == ""


def test_run_multi_result(analytic_file, tmp_path, capsys):
    p = tmp_path / "two.ssair"
    p.write_text("""
func @two(%x: f64) -> (f64, f64) {
^entry:
  %d = add %x, %x
  %s = mul %x, %x
  ret %d, %s
}
""")
    assert main(["run", str(p), "--entry", "two", "--args", "[3]"]) == 0
    out, _ = capsys.readouterr()
    assert json.loads(out) == [6.0, 9.0]


def test_run_tensor_io(analytic_file, capsys):
    w = {"shape": [2, 3], "data": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]}
    v = {"shape": [3, 1], "data": [1.0, 2.0, 3.0]}
    rc = main(["run", analytic_file, "--entry", "net",
               "--args", json.dumps([w, v])])
    assert rc == 0
    out, _ = capsys.readouterr()
    assert isinstance(json.loads(out), float)


def test_grad(mul_file, capsys):
    rc = main(["grad", mul_file, "--entry", "mul",
               "--args", "[3,2]", "--seeds", "[1]"])
    assert rc == 0
    out, _ = capsys.readouterr()
    assert out == '{"x":2.0,"y":3.0}\n'


def test_grad_default_unit_seeds(mul_file, capsys):
    assert main(["grad", mul_file, "--entry", "mul", "--args", "[3,2]"]) == 0
    out, _ = capsys.readouterr()
    assert json.loads(out) == {"x": 2.0, "y": 3.0}


def test_grad_emit_ir_round_trips(abs_file, capsys):
    assert main(["grad", abs_file, "--entry", "absval", "--emit-ir"]) == 0
    out, _ = capsys.readouterr()
    m = parse_ir(out)
    assert "absval__aug" in m.functions and "absval__pb" in m.functions
    assert verify(m) == []
    assert print_ir(m) == out


def test_grad_nondifferentiable_names_op(tmp_path, capsys):
    p = tmp_path / "p.ssair"
    p.write_text("""
func @halfsig(%a: f64) -> f64 {
^entry:
  %s = sigmoid %a
  ret %s
}

func @packs(%x: tensor<3xf64>) -> tensor<2x3xf64> {
^entry:
  %p = fused_pack %x {fn = @halfsig}
  ret %p
}
""")
    rc = main(["grad", str(p), "--entry", "packs", "--emit-ir"])
    assert rc == 1
    _, err = capsys.readouterr()
    assert "fused_pack" in err


def test_batch(abs_file, capsys):
    rc = main(["batch", abs_file, "--entry", "absval", "-B", "3",
               "--args", "[-1,2,-3]"])
    assert rc == 0
    out, _ = capsys.readouterr()
    assert json.loads(out) == [1.0, 2.0, 3.0]


def test_batch_nested_args(mul_file, capsys):
    rc = main(["batch", mul_file, "--entry", "mul", "-B", "2",
               "--args", "[[3,2],[5,4]]"])
    assert rc == 0
    out, _ = capsys.readouterr()
    assert json.loads(out) == [6.0, 20.0]


def test_batch_lane_mismatch(abs_file, capsys):
    rc = main(["batch", abs_file, "--entry", "absval", "-B", "3",
               "--args", "[-1,2]"])
    assert rc == 2


def test_check_valid_silent(mul_file, capsys):
    assert main(["check", mul_file]) == 0
    out, err = capsys.readouterr()
    assert out == "" and err == ""


def test_check_dominance_violation(tmp_path, capsys):
    text = print_ir(parse_ir(ABS_SRC)).replace("ret %v", "ret %nx")
    p = tmp_path / "bad.ssair"
    p.write_text(text)
    assert main(["check", str(p)]) == 1
    out, err = capsys.readouterr()
    assert out == ""
    assert err.count("\n") == 1
    assert "does not dominate" in err


def test_check_parse_error(tmp_path, capsys):
    p = tmp_path / "junk.ssair"
    p.write_text("funk @nope")
    assert main(["check", str(p)]) == 1
    _, err = capsys.readouterr()
    assert err != ""


def test_check_missing_file(tmp_path, capsys):
    assert main(["check", str(tmp_path / "ghost.ssair")]) == 2


def test_print_canonical(mul_file, capsys):
    assert main(["print", mul_file]) == 0
    out, _ = capsys.readouterr()
    assert out == print_ir(parse_ir(MUL_SRC))


def test_gradcheck(abs_file, capsys):
    rc = main(["gradcheck", abs_file, "--entry", "absval",
               "--trials", "5", "--seed", "1"])
    assert rc == 0
    out, _ = capsys.readouterr()
    rep = json.loads(out)
    assert rep["pass"] is True
    assert rep["trials"] == 5
    assert rep["max_tape_dev"] <= 1e-12
    assert rep["max_fd_dev"] <= 1e-5


def test_gradcheck_zero_trials_is_usage_error(abs_file):
    assert main(["gradcheck", abs_file, "--entry", "absval",
                 "--trials", "0"]) == 2


def test_gradcheck_corrupted_rule_fails(tmp_path, capsys):
    # fault injection: swap the pullback's cotangents in the adjoint
    # source; augment finds the poisoned @mul__pb already cached, so
    # the cross-check must flag the disagreement
    from ssagrad import augment
    from ssagrad.ir import Ret

    m = parse_ir(MUL_SRC)
    augment(m, "mul")
    pb = m.get("mul__pb")
    for b in pb.blocks:
        if isinstance(b.term, Ret) and len(b.term.values) == 2:
            b.term.values = (b.term.values[1], b.term.values[0])
    p = tmp_path / "poisoned.ssair"
    p.write_text(print_ir(m))

    rc = main(["gradcheck", str(p), "--entry", "mul",
               "--trials", "3", "--seed", "2"])
    assert rc == 1
    out, _ = capsys.readouterr()
    rep = json.loads(out)
    assert rep["pass"] is False
    assert rep["max_tape_dev"] > 1e-12


def test_train_dan_epochs_zero(tmp_path, capsys):
    out_file = tmp_path / "metrics.jsonl"
    rc = main(["train-dan", "--config", '{"epochs":0}',
               "--out", str(out_file)])
    assert rc == 0
    out, _ = capsys.readouterr()
    assert json.loads(out) == {"epochs_run": 0, "final": None}
    assert out_file.read_text() == ""


def test_train_dan_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "lambda": 0.0,
                               "n_samples": 64, "batch_size": 16}))
    out_file = tmp_path / "metrics.jsonl"
    rc = main(["train-dan", "--config", str(cfg), "--out", str(out_file)])
    assert rc == 0
    out, _ = capsys.readouterr()
    summary = json.loads(out)
    assert summary["epochs_run"] == 1
    lines = out_file.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0]) == summary["final"]


def test_train_dan_unknown_key(capsys):
    assert main(["train-dan", "--config", '{"momentum":0.9}']) == 2


def test_usage_errors(mul_file):
    assert main(["run", mul_file, "--entry", "mul", "--args", "[3]"]) == 2
    assert main(["run", mul_file, "--entry", "ghost", "--args", "[3,2]"]) == 2
    assert main(["run", mul_file, "--entry", "mul", "--args", "oops"]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_wrong_arg_type(mul_file):
    assert main(["run", mul_file, "--entry", "mul", "--args", "[3,true]"]) == 2
    assert main(["run", mul_file, "--entry", "mul",
                 "--args", '[3,{"shape":[1],"data":[1]}]']) == 2


def test_domain_failure_is_exit_one(tmp_path):
    p = tmp_path / "l.ssair"
    p.write_text("""
func @f(%x: f64) -> f64 {
^entry:
  %l = log %x
  ret %l
}
""")
    assert main(["run", str(p), "--entry", "f", "--args", "[-1]"]) == 1


def test_stdout_deterministic(abs_file, tmp_path, capsys):
    def capture(argv):
        assert main(argv) in (0, 1)
        return capsys.readouterr().out

    for argv in (
        ["run", abs_file, "--entry", "absval", "--args", "[-2]"],
        ["grad", abs_file, "--entry", "absval", "--args", "[-2]"],
        ["batch", abs_file, "--entry", "absval", "-B", "3", "--args", "[-1,2,-3]"],
        ["gradcheck", abs_file, "--entry", "absval", "--trials", "4", "--seed", "7"],
        ["print", abs_file],
        ["train-dan", "--config", '{"epochs":1,"n_samples":64,"batch_size":16}',
         "--out", str(tmp_path / "m.jsonl")],
    ):
        runs = {capture(argv) for _ in range(3)}
        assert len(runs) == 1, argv
