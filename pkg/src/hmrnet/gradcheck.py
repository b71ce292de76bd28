"""Finite-difference checks for every differentiable operation."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .detection import Targets, detection_loss
from .global_router import RouterParams, UsageTracker, cekd_loss, routing_regularization
from .local_router import coherence_loss
from .cem import alignment_loss, hungarian, similarity
from .tensor import Tensor, finite_difference_oracle, relative_error

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class OpCheck:
    name: str
    points: int
    worst_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst_error < TOLERANCE


def _leaf(rng, shape, low=-1.0, high=1.0):
    return T.parameter(rng.uniform(low, high, shape))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return T.parameter(x)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(out * Tensor(weights))


# Each builder returns (scalar function of the inputs, inputs).
Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _unary(op, shape=(3, 4), make=_leaf):
    def build(rng):
        x = make(rng, shape)
        with T.no_grad():
            w = rng.normal(size=op(x).shape)
        return (lambda x: _weighted(op(x), w)), [x]
    return build


def _binary(op, sa=(3, 4), sb=(4,)):
    def build(rng):
        a, b = _leaf(rng, sa), _leaf(rng, sb)
        w = rng.normal(size=np.broadcast_shapes(sa, sb))
        return (lambda a, b: _weighted(op(a, b), w)), [a, b]
    return build


def _positive(rng, shape):
    return T.parameter(rng.uniform(0.2, 2.0, shape))


def _matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    w = rng.normal(size=(2, 3, 5))
    return (lambda a, b: _weighted(T.matmul(a, b), w)), [a, b]


def _conv(rng):
    x, k = _leaf(rng, (2, 2, 4, 5)), _leaf(rng, (3, 2, 3, 3))
    w = rng.normal(size=(2, 3, 4, 5))
    return (lambda x, k: _weighted(T.conv2d(x, k), w)), [x, k]


def _concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    w = rng.normal(size=(2, 5))
    return (lambda a, b: _weighted(T.concat([a, b], axis=1), w)), [a, b]


def _getitem(rng):
    x = _leaf(rng, (5, 3))
    rows = np.array([0, 2, 2, 4])
    w = rng.normal(size=(4, 2))
    return (lambda x: _weighted(x[rows, 1:], w)), [x]


def _scatter(rng):
    x = _leaf(rng, (2, 3))
    w = rng.normal(size=(4, 3))
    return (lambda x: _weighted(T.scatter_rows(x, np.array([3, 1]), 4), w)), [x]


def _softmax(rng):
    x = _leaf(rng, (3, 5), -2.0, 2.0)
    tau = float(rng.uniform(0.5, 2.0))
    w = rng.normal(size=(3, 5))
    return (lambda x: _weighted(T.softmax_t(x, tau, axis=-1), w)), [x]


def _kl(rng):
    p = rng.dirichlet(np.ones(5))
    q_logits = _leaf(rng, (5,), -2.0, 2.0)
    return (lambda q: T.kl_divergence(p, T.softmax_t(q))), [q_logits]


def _l2(rng):
    x = _leaf(rng, (3, 4))
    w = rng.normal(size=(3, 4))
    return (lambda x: _weighted(T.l2_normalize(x)[0], w)), [x]


def _layer_norm(rng):
    x, g, b = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    w = rng.normal(size=(3, 6))
    return (lambda x, g, b: _weighted(T.layer_norm(x, g, b), w)), [x, g, b]


def _batch_norm(rng):
    x, g, b = _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (2,)), _leaf(rng, (2,))
    w = rng.normal(size=(3, 2, 3, 3))
    state = T.BatchNormState(2)
    return (lambda x, g, b: _weighted(T.batch_norm(x, g, b, state, training=True, update_stats=False), w)), [x, g, b]


def _pool(rng):
    x = _leaf(rng, (2, 2, 4, 6))
    w = rng.normal(size=(2, 2, 2, 3))
    return (lambda x: _weighted(T.avg_pool2(x), w)), [x]


def _spatial_mean(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    w = rng.normal(size=(2, 3))
    return (lambda x: _weighted(T.spatial_mean(x), w)), [x]


def _smooth_l1(rng):
    # keep clear of the |x| = beta seam where the second derivative jumps
    x = rng.uniform(-3.0, 3.0, (3, 4))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x + 0.1, x)
    w = rng.normal(size=(3, 4))
    return (lambda x: _weighted(T.smooth_l1(x), w)), [T.parameter(x)]


def _detection_loss(rng):
    k, h, w = 2, 3, 3
    pred = _leaf(rng, (2, k + 5, h, w))
    targets = []
    for _ in range(2):
        labels = rng.integers(0, k + 1, h * w)
        positive = labels > 0
        offsets = rng.normal(size=(h * w, 4)) * positive[:, None]
        targets.append(Targets(labels, offsets, positive))
    return (lambda p: detection_loss(p, targets, k)), [pred]


def _coherence(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    return (lambda x: coherence_loss(T.softmax_t(x, axis=1))), [x]


def _cekd(rng):
    e, k = 3, 4
    teachers = [Tensor(rng.normal(size=(2, k))) for _ in range(e)]
    student = _leaf(rng, (2, k))
    gate = T.parameter(rng.uniform(0.2, 1.0, (2, 1)))
    return (lambda s, g: cekd_loss(teachers, np.array([0, 2]), 2.0, gate=g, student_logits=s)), [student, gate]


def _routing(rng):
    logits = _leaf(rng, (4, 3))

    def f(x):
        tracker = UsageTracker(3)
        tracker.update(T.softmax_t(x))
        return routing_regularization(tracker)
    return f, [logits]


def _router(rng):
    router = RouterParams(rng, 5, 3, hidden=4)
    u, z = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    w = rng.normal(size=(2, 3))
    return (lambda u, z: _weighted(T.softmax_t(router.logits(u, z)), w)), [u, z]


def _alignment(rng):
    v, t = _leaf(rng, (3, 4)), _leaf(rng, (5, 4))
    assignment = hungarian(similarity(T.l2_normalize(v)[0], T.l2_normalize(t)[0]).data)

    def f(v, t):
        s = similarity(T.l2_normalize(v)[0], T.l2_normalize(t)[0])
        return alignment_loss(s, assignment)
    return f, [v, t]


def _masked_fusion(rng):
    f = _leaf(rng, (3, 4, 4))
    labels = rng.integers(0, 2, (4, 4))
    masks = [Tensor((labels == r).astype(float)) for r in range(2)]
    k = [Tensor(rng.normal(size=(3, 3, 3, 3)) * 0.3) for _ in range(2)]

    def fn(f):
        out = None
        for m, kernel in zip(masks, k):
            part = T.conv2d(f * m, kernel) * m
            out = part if out is None else out + part
        return T.tsum(T.square(out))
    return fn, [f]


REGISTRY: dict[str, Builder] = {
    "add": _binary(T.add),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "scale": _unary(lambda x: T.scale(x, 1.7)),
    "reciprocal": _unary(T.reciprocal, make=lambda rng, s: _away_from_zero(rng, s, 0.3)),
    "square": _unary(T.square),
    "relu": _unary(T.relu, make=_away_from_zero),
    "sigmoid": _unary(T.sigmoid),
    "exp": _unary(T.exp),
    "log": _unary(T.log, make=_positive),
    "smooth_l1": _smooth_l1,
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "transpose": _unary(T.transpose),
    "concat": _concat,
    "getitem": _getitem,
    "scatter_rows": _scatter,
    "sum": _unary(lambda x: T.tsum(x, axis=0)),
    "mean": _unary(lambda x: T.tmean(x, axis=1, keepdims=True)),
    "matmul": _matmul,
    "conv2d": _conv,
    "avg_pool2": _pool,
    "spatial_mean": _spatial_mean,
    "softmax": _softmax,
    "log_softmax": _unary(T.log_softmax),
    "kl_divergence": _kl,
    "l2_normalize": _l2,
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "detection_loss": _detection_loss,
    "coherence_loss": _coherence,
    "distillation_loss": _cekd,
    "routing_regularization": _routing,
    "router": _router,
    "alignment_loss": _alignment,
    "masked_fusion": _masked_fusion,
}


def check_once(fn: Callable[..., Tensor], inputs: list[Tensor], h: float = STEP) -> float:
    for x in inputs:
        x.zero_grad()
    T.backward(fn(*inputs))
    analytic = np.concatenate([x.grad.reshape(-1) for x in inputs])
    numeric = []
    for k, x in enumerate(inputs):
        def partial(_x, k=k):
            return fn(*inputs)
        numeric.append(finite_difference_oracle(partial, x, h).reshape(-1))
    return relative_error(analytic, np.concatenate(numeric))


def check_op(name: str, points: int = 100, seed: int = 0) -> OpCheck:
    started = time.perf_counter()
    worst = 0.0
    for p in range(points):
        rng = np.random.default_rng([seed, p, sum(map(ord, name))])
        fn, inputs = REGISTRY[name](rng)
        worst = max(worst, check_once(fn, inputs))
    return OpCheck(name, points, worst, time.perf_counter() - started)


def end_to_end_check(points: int = 100, seed: int = 0) -> OpCheck:
    """Stage-3 total loss against finite differences at random parameter coordinates.

    The usage tracker is reset before every evaluation so the loss is a
    pure function of the parameters; detached quantities stay fixed.
    """
    from .data import DEFAULT_DOMAINS, default_prompts, generate_scene
    from .model import HMRNet, ModelConfig
    from .train import total_loss

    started = time.perf_counter()
    model = HMRNet(ModelConfig(seed=seed))
    rng = np.random.default_rng([seed, 99])
    model.embeddings.vectors.data[...] = rng.normal(size=model.embeddings.vectors.shape)
    model.embeddings_ready = True
    scenes = [generate_scene(DEFAULT_DOMAINS[d], seed + d) for d in (0, 2)]
    images = np.stack([s.image[:, 16:32, 16:32] for s in scenes])
    domains = np.array([0, 2])
    targets = []
    for s in scenes:
        labels = rng.integers(0, 7, 16)
        positive = labels > 0
        targets.append(Targets(labels, rng.normal(size=(16, 4)) * 0.3 * positive[:, None], positive))
    prompts = [text for text, _, _ in default_prompts()][:10]

    teacher = None

    def loss():
        # the distillation teacher is detached, so it is held at its base-point value
        model.tracker = UsageTracker(model.config.global_experts)
        out = model.forward(images, domains, stage=3, training=True, targets=targets, prompts=prompts,
                            teacher=teacher)
        return total_loss(out.losses, 3), out.teacher

    params = [p for _, p in model.named_parameters()]
    model.zero_grad()
    base, teacher = loss()
    reached = T.backward(base)
    reached_ids = {id(p) for p in reached}
    candidates = [(p, i) for p in params if id(p) in reached_ids for i in range(p.size)]
    chosen = rng.choice(len(candidates), size=min(points, len(candidates)), replace=False)
    analytic, numeric = [], []
    for c in chosen:
        p, i = candidates[int(c)]
        flat = p.data.reshape(-1)
        saved = flat[i]
        with T.no_grad():
            flat[i] = saved + STEP
            up = loss()[0].item()
            flat[i] = saved - STEP
            down = loss()[0].item()
        flat[i] = saved
        analytic.append(p.grad.reshape(-1)[i])
        numeric.append((up - down) / (2 * STEP))
    err = relative_error(np.array(analytic), np.array(numeric))
    return OpCheck("stage3_total_loss", len(chosen), err, time.perf_counter() - started)


def run_gradcheck(points: int = 100, seed: int = 0, names=None, end_to_end: bool = True) -> list[OpCheck]:
    names = list(REGISTRY) if names is None else list(names)
    results = [check_op(n, points, seed) for n in names]
    if end_to_end:
        results.append(end_to_end_check(points, seed))
    return results
