"""Two-headed classifier trained with a gradient-confusion penalty.

A shared dense trunk feeds a class head and a dataset head.  The
synthetic data carries an engineered confound: the dataset label
correlates with the class label, and a sign-randomized magnitude code
in a block of coordinates encodes dataset identity outright.  Training
pits two losses against each other:

    c_loss = bce(yc_hat, y_c) + lam * bce(yd_hat, 1 - y_d)
    d_loss = bce(yd_hat, y_d)

Each step backpropagates both losses and applies the summed gradient
to every parameter it reaches, so the trunk is pushed to strip the
features the dataset head relies on while the dataset head keeps
chasing whatever signal remains.

The whole minibatch loss lives in a single IR function, so one
augmented forward pass and two pullback runs produce both gradients.
Evaluation (head accuracy, trunk features for the probe) goes through
IR as well; only the ridge-regression probe itself and the parameter
update run as host-side numpy.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .interp import DEFAULT_STEP_LIMIT, Machine
from .ir import F64, Function, Module, tensor_type
from .reverse_ad import augment
from .structure import SEmitter, flatten
from .tensor import DenseTensor


@dataclass
class DenseLayerParams:
    """One dense layer; W is out x in, b is out."""

    W: DenseTensor
    b: DenseTensor


@dataclass
class ModelParams:
    trunk: list[DenseLayerParams]
    class_head: list[DenseLayerParams]
    domain_head: list[DenseLayerParams]

    def layers(self) -> list[DenseLayerParams]:
        return [*self.trunk, *self.class_head, *self.domain_head]


@dataclass
class DANConfig:
    lam: float = 1.0
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    seed: int = 7
    rho: float = 0.95
    dim: int = 16
    trunk_sizes: tuple[int, ...] = (16, 8)
    head_sizes: tuple[int, ...] = (8, 1)
    n_samples: int = 320


@dataclass
class SyntheticSample:
    x: DenseTensor
    y_c: int
    y_d: int


@dataclass
class MetricsHistory:
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def _sizes_of(params: ModelParams) -> tuple[tuple[int, ...], ...]:
    def chain(layers: list[DenseLayerParams]) -> tuple[int, ...]:
        return (layers[0].W.shape[1],) + tuple(l.W.shape[0] for l in layers)

    return chain(params.trunk), chain(params.class_head), chain(params.domain_head)


def _weight_args(params: ModelParams) -> tuple:
    out = []
    for layer in params.layers():
        out.extend((layer.W, layer.b))
    return tuple(out)


def _declare_weights(em: SEmitter, layer_sizes) -> list[list[tuple[int, int]]]:
    """Emit W/b params for each chain; returns per-chain (W, b) vid pairs."""
    chains = []
    for prefix, sizes in zip(("t", "c", "d"), layer_sizes):
        pairs = []
        for k in range(len(sizes) - 1):
            fi, fo = sizes[k], sizes[k + 1]
            w = em.param(f"{prefix}W{k}", tensor_type(fo, fi))
            b = em.param(f"{prefix}b{k}", tensor_type(fo))
            pairs.append((w, b))
        chains.append(pairs)
    return chains


def init_params(layer_sizes, rng: random.Random,
                trunk_bias: float = 0.4) -> ModelParams:
    """Uniform init scaled by fan-in and fan-out.

    Head biases start at zero.  Trunk biases start at ``trunk_bias``:
    with zero bias, tanh units are odd functions and the magnitude
    signature in the synthetic data is invisible to every first-step
    gradient; a small constant offset breaks that symmetry so the
    dataset head can begin demodulating it.
    """
    def chain(sizes, bias: float) -> list[DenseLayerParams]:
        out = []
        for k in range(len(sizes) - 1):
            fi, fo = sizes[k], sizes[k + 1]
            r = math.sqrt(6.0 / (fi + fo))
            flat = [rng.uniform(-r, r) for _ in range(fo * fi)]
            out.append(DenseLayerParams(
                DenseTensor.from_flat((fo, fi), flat),
                DenseTensor.from_flat((fo,), [bias] * fo),
            ))
        return out

    t, c, d = layer_sizes
    return ModelParams(chain(t, trunk_bias), chain(c, 0.0), chain(d, 0.0))


# ------------------------------------------------------- IR builders


def build_model_ir(layer_sizes, module: Module | None = None) -> Module:
    """Emit @model_forward(weights..., x) -> (y_c_hat, y_d_hat).

    One sample at a time: x is a feature vector, both outputs are
    probabilities.  Weights are function parameters, so the adjoint
    transforms differentiate with respect to them directly.
    """
    m = module if module is not None else Module()
    em = SEmitter("model_forward", (F64, F64), m)
    trunk, class_head, domain_head = _declare_weights(em, layer_sizes)
    dim = layer_sizes[0][0]
    x = em.param("x", tensor_type(dim))

    h = em.emit("reshape", (x,), {"shape": (dim, 1)}, "h")
    for w, b in trunk:
        z = em.emit("matmul", (w, h), None, "z")
        out = em.types[b].shape[0]
        bc = em.emit("reshape", (b,), {"shape": (out, 1)}, "bc")
        h = em.emit("tanh", (em.emit("add", (z, bc), None, "zb"),), None, "h")

    def head(pairs, tag: str) -> int:
        cur = h
        for k, (w, b) in enumerate(pairs):
            z = em.emit("matmul", (w, cur), None, f"{tag}z")
            out = em.types[b].shape[0]
            bc = em.emit("reshape", (b,), {"shape": (out, 1)}, f"{tag}bc")
            zb = em.emit("add", (z, bc), None, f"{tag}zb")
            if k + 1 < len(pairs):
                cur = em.emit("tanh", (zb,), None, f"{tag}h")
            else:
                cur = zb
        logit = em.emit("reduce_sum", (cur,), {"axis": "all"}, f"{tag}logit")
        return em.emit("sigmoid", (logit,), None, f"{tag}hat")

    yc = head(class_head, "c")
    yd = head(domain_head, "d")
    m.add(flatten(em.finish((yc, yd))))
    return m


def _batch_trunk(em: SEmitter, trunk, x: int) -> int:
    h = x
    for w, b in trunk:
        wt = em.emit("transpose", (w,), None, "wt")
        z = em.emit("matmul", (h, wt), None, "z")
        zb = em.emit("add", (z, b), None, "zb")
        h = em.emit("tanh", (zb,), None, "h")
    return h


def _batch_head(em: SEmitter, pairs, h: int, n: int, tag: str) -> int:
    cur = h
    for k, (w, b) in enumerate(pairs):
        wt = em.emit("transpose", (w,), None, f"{tag}wt")
        z = em.emit("matmul", (cur, wt), None, f"{tag}z")
        zb = em.emit("add", (z, b), None, f"{tag}zb")
        if k + 1 < len(pairs):
            cur = em.emit("tanh", (zb,), None, f"{tag}h")
        else:
            cur = zb
    flatz = em.emit("reshape", (cur,), {"shape": (n,)}, f"{tag}logit")
    return em.emit("sigmoid", (flatz,), None, f"{tag}hat")


def _bce_mean(em: SEmitter, p: int, y: int, n: int, lob: int, hib: int,
              ones: int, tag: str) -> int:
    """Mean binary cross-entropy with predictions clamped into (0, 1)."""
    under = em.emit("lt", (p, lob), None, f"{tag}u")
    p1 = em.emit("select", (under, lob, p), None, f"{tag}p1")
    over = em.emit("gt", (p1, hib), None, f"{tag}o")
    p2 = em.emit("select", (over, hib, p1), None, f"{tag}p2")
    t1 = em.emit("mul", (y, em.emit("log", (p2,), None, f"{tag}lp")), None, f"{tag}t1")
    yn = em.emit("sub", (ones, y), None, f"{tag}yn")
    pn = em.emit("sub", (ones, p2), None, f"{tag}pn")
    t2 = em.emit("mul", (yn, em.emit("log", (pn,), None, f"{tag}ln")), None, f"{tag}t2")
    s = em.emit("add", (t1, t2), None, f"{tag}s")
    tot = em.emit("reduce_sum", (s,), {"axis": "all"}, f"{tag}tot")
    scale = em.const_f64(-1.0 / n, f"{tag}scale")
    return em.emit("mul", (tot, scale), None, f"{tag}bce")


def build_loss_ir(module: Module, layer_sizes, batch_size: int) -> Function:
    """Emit the whole minibatch loss as one function.

    @dan_minibatch_loss_{B}(weights..., X, Yc, Yd, lam) returns
    (c_loss, d_loss).  lam rides along as a runtime argument so one
    build serves every penalty weight.
    """
    name = f"dan_minibatch_loss_{batch_size}"
    if name in module.functions:
        return module.get(name)
    n = batch_size
    em = SEmitter(name, (F64, F64), module)
    trunk, class_head, domain_head = _declare_weights(em, layer_sizes)
    dim = layer_sizes[0][0]
    x = em.param("X", tensor_type(n, dim))
    yc = em.param("Yc", tensor_type(n))
    yd = em.param("Yd", tensor_type(n))
    lam = em.param("lam", F64)

    h = _batch_trunk(em, trunk, x)
    yc_hat = _batch_head(em, class_head, h, n, "c")
    yd_hat = _batch_head(em, domain_head, h, n, "d")

    eps = 1e-7
    lob = em.emit("bcast", (em.const_f64(eps, "lo"),), {"shape": (n,)}, "lob")
    hib = em.emit("bcast", (em.const_f64(1.0 - eps, "hi"),), {"shape": (n,)}, "hib")
    ones = em.emit("bcast", (em.const_f64(1.0, "one"),), {"shape": (n,)}, "ones")

    class_term = _bce_mean(em, yc_hat, yc, n, lob, hib, ones, "c")
    yd_flip = em.emit("sub", (ones, yd), None, "ydflip")
    confuse = _bce_mean(em, yd_hat, yd_flip, n, lob, hib, ones, "x")
    c_loss = em.emit("add", (class_term, em.emit("mul", (lam, confuse), None, "pen")),
                     None, "c_loss")
    d_loss = _bce_mean(em, yd_hat, yd, n, lob, hib, ones, "d")

    fn = flatten(em.finish((c_loss, d_loss)))
    module.add(fn)
    return fn


def build_eval_ir(module: Module, layer_sizes, n: int) -> Function:
    """@dan_eval_{n}(weights..., X) -> (YcHat, YdHat, H).

    Head probabilities for accuracy plus the trunk features the probe
    fits against, all from the same forward pass.
    """
    name = f"dan_eval_{n}"
    if name in module.functions:
        return module.get(name)
    trunk_out = layer_sizes[0][-1]
    em = SEmitter(
        name, (tensor_type(n), tensor_type(n), tensor_type(n, trunk_out)), module
    )
    trunk, class_head, domain_head = _declare_weights(em, layer_sizes)
    dim = layer_sizes[0][0]
    x = em.param("X", tensor_type(n, dim))
    h = _batch_trunk(em, trunk, x)
    yc_hat = _batch_head(em, class_head, h, n, "c")
    yd_hat = _batch_head(em, domain_head, h, n, "d")
    fn = flatten(em.finish((yc_hat, yd_hat, h)))
    module.add(fn)
    return fn


# ---------------------------------------------------------- training


def make_synthetic(cfg: DANConfig) -> list[SyntheticSample]:
    """Confounded two-label data, deterministic in cfg.seed.

    P(y_d = y_c) = rho ties the labels together.  The class label
    shifts the first quarter of the coordinates by a small mean offset.
    The dataset label is magnitude-coded into the back half: each of
    those gets a random sign times a magnitude that depends on y_d, so
    its mean is zero and no linear readout of raw features sees it.  A
    trunk has to rectify before the signature becomes linearly
    decodable, which is exactly what dataset-head pressure teaches it
    to do, and what the confusion penalty starves.
    """
    rng = random.Random(cfg.seed)
    out = []
    for _ in range(cfg.n_samples):
        y_c = 1 if rng.random() < 0.5 else 0
        y_d = y_c if rng.random() < cfg.rho else 1 - y_c
        vals = [rng.gauss(0.0, 0.6) for _ in range(cfg.dim)]
        sc = 0.25 if y_c == 1 else -0.25
        m = 2.0 if y_d == 1 else 0.3
        for j in range(max(1, cfg.dim // 4)):
            vals[j] += sc
        for j in range(cfg.dim // 2, cfg.dim):
            s = 1.0 if rng.random() < 0.5 else -1.0
            vals[j] = s * (m + rng.gauss(0.0, 0.1))
        out.append(SyntheticSample(DenseTensor.from_flat((cfg.dim,), vals), y_c, y_d))
    return out


def _batch_tensors(batch: list[SyntheticSample]) -> tuple:
    dim = batch[0].x.shape[0]
    rows = []
    for s in batch:
        rows.extend(s.x.flat())
    X = DenseTensor.from_flat((len(batch), dim), rows)
    Yc = DenseTensor.from_flat((len(batch),), [float(s.y_c) for s in batch])
    Yd = DenseTensor.from_flat((len(batch),), [float(s.y_d) for s in batch])
    return X, Yc, Yd


def dan_step(
    module: Module,
    params: ModelParams,
    batch: list[SyntheticSample],
    cfg: DANConfig,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> tuple[ModelParams, dict]:
    """One training step: forward once, pull back both losses, descend.

    The augmented loss runs a single time; its recorded traces feed
    two pullback evaluations with seeds (1,0) and (0,1).  The applied
    gradient on every parameter is the sum of what both losses send
    there, and the update is plain gradient descent.
    """
    if not batch:
        raise ValueError("dan_step needs a nonempty batch")
    sizes = _sizes_of(params)
    loss_fn = build_loss_ir(module, sizes, len(batch))
    aug_fn, pb_fn = augment(module, loss_fn.name)

    X, Yc, Yd = _batch_tensors(batch)
    args = _weight_args(params) + (X, Yc, Yd, cfg.lam)
    machine = Machine(module, step_limit)
    out = machine.call(aug_fn.name, args)
    c_loss, d_loss, blog, vstack = out[0], out[1], out[2], out[3]
    g_c = machine.call(pb_fn.name, (blog, vstack, 1.0, 0.0))
    g_d = machine.call(pb_fn.name, (blog, vstack, 0.0, 1.0))

    flat = []
    for i, layer in enumerate(params.layers()):
        gw = g_c[2 * i].data + g_d[2 * i].data
        gb = g_c[2 * i + 1].data + g_d[2 * i + 1].data
        flat.append(DenseLayerParams(
            DenseTensor(layer.W.data - cfg.lr * gw),
            DenseTensor(layer.b.data - cfg.lr * gb),
        ))
    nt, nc = len(params.trunk), len(params.class_head)
    new = ModelParams(flat[:nt], flat[nt:nt + nc], flat[nt + nc:])
    return new, {"c_loss": c_loss, "d_loss": d_loss}


def _domain_probe_acc(H: DenseTensor, yd: list[int], alpha: float = 0.1) -> float:
    """Ridge-fit linear probe on frozen trunk features predicting y_d.

    Two-fold cross-validated: fit on one half, score the other, and
    average, so the number reflects decodable signal rather than an
    in-sample fit.
    """
    X = np.column_stack([H.data, np.ones(H.shape[0])])
    t = np.array([1.0 if y == 1 else -1.0 for y in yd])
    acc = 0.0
    for tr, te in ((slice(0, None, 2), slice(1, None, 2)),
                   (slice(1, None, 2), slice(0, None, 2))):
        gram = X[tr].T @ X[tr] + alpha * np.eye(X.shape[1])
        w = np.linalg.solve(gram, X[tr].T @ t[tr])
        acc += float(np.mean((X[te] @ w >= 0.0) == (t[te] > 0.0)))
    return acc / 2.0


def evaluate(
    module: Module,
    params: ModelParams,
    data: list[SyntheticSample],
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> dict:
    """Class accuracy, dataset-head accuracy, and probe accuracy."""
    sizes = _sizes_of(params)
    fn = build_eval_ir(module, sizes, len(data))
    X, _, _ = _batch_tensors(data)
    yc_hat, yd_hat, H = Machine(module, step_limit).call(
        fn.name, _weight_args(params) + (X,)
    )
    yc = np.array([s.y_c for s in data])
    yd = np.array([s.y_d for s in data])
    class_acc = float(np.mean((yc_hat.data >= 0.5) == (yc == 1)))
    domain_acc = float(np.mean((yd_hat.data >= 0.5) == (yd == 1)))
    probe = _domain_probe_acc(H, [s.y_d for s in data])
    return {"class_acc": class_acc, "domain_acc": domain_acc,
            "domain_probe_acc": probe}


def train(cfg: DANConfig, module: Module | None = None) -> MetricsHistory:
    """Run the full loop; one metrics record per epoch.

    Deterministic in cfg: data, init, and batch order all derive from
    cfg.seed, and every float in the history comes out bit-identical
    across runs.
    """
    m = module if module is not None else Module()
    layer_sizes = (cfg.trunk_sizes, cfg.head_sizes, cfg.head_sizes)
    data = make_synthetic(cfg)
    params = init_params(layer_sizes, random.Random(cfg.seed + 1))
    order_rng = random.Random(cfg.seed + 2)

    nb = len(data) // cfg.batch_size
    history = MetricsHistory()
    for epoch in range(cfg.epochs):
        order = list(range(len(data)))
        order_rng.shuffle(order)
        c_sum = d_sum = 0.0
        for k in range(nb):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            params, step_metrics = dan_step(m, params, [data[i] for i in idx], cfg)
            c_sum += step_metrics["c_loss"]
            d_sum += step_metrics["d_loss"]
        ev = evaluate(m, params, data)
        history.records.append({
            "epoch": epoch,
            "c_loss": c_sum / nb,
            "d_loss": d_sum / nb,
            "class_acc": ev["class_acc"],
            "domain_probe_acc": ev["domain_probe_acc"],
        })
    return history
