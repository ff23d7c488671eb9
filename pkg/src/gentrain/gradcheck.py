"""End-to-end finite-difference verification of the autodiff engine.

Each check wraps one path as a scalar function of a single tensor, then
compares tape gradients with central differences. Paths through ``relu`` are
only evaluated at points whose pre-activations sit at least ``KINK_MARGIN``
away from zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hsm import predicted_class
from .nn import BatchNorm, Classifier, cross_entropy
from .seeding import stream
from .world import WorldConfig, build_world

TOLERANCE = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    detail: str = ""


def _weighted_sum(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.reduce_sum(ad.multiply(t, w))


def _primitive_checks(rng: np.random.Generator):
    """(name, function, point) triples, one or more per primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    row = rng.normal(size=(1, 4))
    w34 = rng.normal(size=(3, 4))
    w32 = rng.normal(size=(3, 2))
    w64 = rng.normal(size=(6, 4))
    w38 = rng.normal(size=(3, 8))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    relu_pt = rng.normal(size=(3, 4))
    relu_pt = np.where(np.abs(relu_pt) < 0.1, relu_pt + np.sign(relu_pt + 1e-9) * 0.2, relu_pt)

    return [
        ("matmul", lambda x: _weighted_sum(ad.matmul(x, b), w32), a),
        ("matmul", lambda x: _weighted_sum(ad.matmul(a, x), w32), b),
        ("add", lambda x: _weighted_sum(ad.add(x, row), w34), a),
        ("add", lambda x: _weighted_sum(ad.add(a, x), w34), row),
        ("subtract", lambda x: _weighted_sum(ad.subtract(a, x), w34), row),
        ("subtract", lambda x: _weighted_sum(ad.subtract(x, a), w34), a),
        ("elementwise_multiply", lambda x: _weighted_sum(ad.multiply(x, x), w34), a),
        ("elementwise_multiply", lambda x: _weighted_sum(ad.multiply(a, x), w34), row),
        ("scalar_scale", lambda x: _weighted_sum(ad.scalar_scale(x, -1.7), w34), a),
        ("tanh", lambda x: _weighted_sum(ad.tanh(x), w34), a),
        ("relu", lambda x: _weighted_sum(ad.relu(x), w34), relu_pt),
        ("log", lambda x: _weighted_sum(ad.log(x), w34), pos),
        ("exp", lambda x: _weighted_sum(ad.exp(x), w34), a),
        ("reduce_sum", lambda x: _weighted_sum(ad.reduce_sum(ad.multiply(x, x), axis=0), w34[0]), a),
        ("reduce_mean", lambda x: _weighted_sum(ad.reduce_mean(ad.multiply(x, x), axis=1), w34[:, 0]), a),
        ("reduce_mean", lambda x: ad.reduce_mean(ad.multiply(x, w34)), a),
        ("reduce_var", lambda x: _weighted_sum(ad.reduce_var(x, axis=0, biased=True), w34[0]), a),
        ("reduce_var", lambda x: _weighted_sum(ad.reduce_var(x, axis=1, biased=False), w34[:, 0]), a),
        ("broadcast", lambda x: _weighted_sum(ad.broadcast(x, (3, 4)), w34), row),
        ("slice", lambda x: _weighted_sum(ad.slice_(x, (slice(0, 2), slice(1, 3))), w34[:2, :2]), a),
        ("slice", lambda x: _weighted_sum(ad.slice_(x, (np.array([0, 2, 0]), np.array([1, 1, 3]))),
                                          w34[0, :3]), a),
        ("concat", lambda x: _weighted_sum(ad.concat([x, ad.tanh(x)], axis=0), w64), a),
        ("concat", lambda x: _weighted_sum(ad.concat([x, a], axis=1), w38), a),
        ("transpose", lambda x: _weighted_sum(ad.transpose(x), w34.T), a),
    ]


def _param_function(layer, attr: str, fn):
    """Scalar function of a replacement value for ``layer.attr``."""
    def f(t):
        original = getattr(layer, attr)
        setattr(layer, attr, t)
        try:
            return fn()
        finally:
            setattr(layer, attr, original)
    return f


def _relu_margin(clf: Classifier, x: np.ndarray, training: bool) -> float:
    """Smallest |input| to any relu on this forward pass."""
    h = np.asarray(x)
    margin = np.inf
    state = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in clf.bn_layers]
    for layer in clf.layers:
        if layer.kind == "relu":
            margin = min(margin, float(np.abs(h).min()))
        h = layer.forward(h, training).values
    for bn, (mu, var) in zip(clf.bn_layers, state):
        bn.running_mean, bn.running_var = mu, var
    return margin


def _restore_bn(clf: Classifier, fn):
    """Run ``fn`` and put BN running moments back (train-mode forwards move them)."""
    def wrapped(t):
        state = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in clf.bn_layers]
        try:
            return fn(t)
        finally:
            for bn, (mu, var) in zip(clf.bn_layers, state):
                bn.running_mean, bn.running_var = mu, var
    return wrapped


def _model_checks(rng: np.random.Generator):
    checks = []

    # two-layer tanh net, every parameter
    net = Classifier.build(5, 3, hidden=(6,), rng=rng, activation="tanh", batchnorm=False)
    X = rng.normal(size=(7, 5))
    y = rng.integers(0, 3, size=7)
    for name, layer in enumerate(net.layers):
        for attr in ("weight", "bias"):
            if hasattr(layer, attr):
                fn = _param_function(layer, attr, lambda: cross_entropy(net.logits(X), y))
                checks.append((f"tanh_net.{name}.{attr}", fn, getattr(layer, attr).values))

    # batch norm, train mode: input and affine parameters
    bn = BatchNorm(4)
    bn.gamma.values = rng.uniform(0.5, 1.5, size=4)
    bn.beta.values = rng.normal(size=4)
    H = rng.normal(size=(6, 4)) * 2.0 + 1.0
    wH = rng.normal(size=(6, 4))
    checks.append(("batchnorm_train.input", lambda x: _weighted_sum(bn.forward(x, True), wH), H))
    for attr in ("gamma", "beta"):
        fn = _param_function(bn, attr, lambda: _weighted_sum(bn.forward(H, True), wH))
        checks.append((f"batchnorm_train.{attr}", fn, getattr(bn, attr).values))

    # softmax cross-entropy w.r.t. logits
    Z = rng.normal(size=(5, 4))
    yz = rng.integers(0, 4, size=5)
    checks.append(("softmax_cross_entropy", lambda z: cross_entropy(z, yz), Z))

    # default relu/BN classifier, train mode, every parameter (points away from kinks)
    for _ in range(20):
        clf = Classifier.build(8, 3, hidden=(10, 10), rng=rng)
        Xc = rng.normal(size=(12, 8))
        if _relu_margin(clf, Xc, training=True) > KINK_MARGIN:
            break
    yc = rng.integers(0, 3, size=12)
    for idx, layer in enumerate(clf.layers):
        for attr in layer.params():
            fn = _restore_bn(clf, _param_function(
                layer, attr, lambda: cross_entropy(clf.logits(Xc, training=True), yc)))
            checks.append((f"classifier_train.{idx}.{attr}", fn, getattr(layer, attr).values))
    return checks


def _latent_checks(rng: np.random.Generator, n_codes: int = 3):
    """Gradient of the predicted-class logit w.r.t. the latent code through G then C."""
    world = build_world(WorldConfig(master_seed=int(rng.integers(1 << 31))))
    clf = Classifier.build(world.obs_dim, world.n_classes, rng=rng)
    # give BN non-trivial running moments
    warm = world.generate_batch(world.sample_latent(rng, 64), rng.integers(0, world.n_classes, 64))
    for _ in range(5):
        clf.logits(warm, training=True)
    checks = []
    while len(checks) < n_codes:
        y = int(rng.integers(world.n_classes))
        h = world.sample_latent(rng)[None, :]
        x = world.generate_batch(h, [y])
        if _relu_margin(clf, x, training=False) <= KINK_MARGIN:
            continue
        k = predicted_class(clf, x[0])
        fn = lambda t, y=y, k=k: ad.slice_(clf.logits(world.generator(t, [y])), (0, k))
        checks.append((f"latent_logit_through_generator_classifier[{len(checks)}]", fn, h))
    return checks


def gradcheck_command(seed: int = 0, eps: float = 1e-6, tolerance: float = TOLERANCE) -> list[CheckResult]:
    """Run every check; a failing check's name identifies the path (and primitive)."""
    rng = stream(seed, "gradcheck")
    results = []
    for name, fn, point in _primitive_checks(rng) + _model_checks(rng) + _latent_checks(rng):
        try:
            err = ad.finite_difference_check(fn, point, eps=eps)
            results.append(CheckResult(name, err, bool(err <= tolerance)))
        except Exception as exc:  # report and keep going
            results.append(CheckResult(name, float("nan"), False, f"{type(exc).__name__}: {exc}"))
    return results


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.detail}" if r.detail else ""
        lines.append(f"{status}  {r.name:<48s} max rel err {r.error:.2e}{extra}")
    n_fail = sum(not r.passed for r in results)
    tail = f"{len(results) - n_fail}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def run(seed: int = 0) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = gradcheck_command(seed)
    return all(r.passed for r in results), format_report(results, time.perf_counter() - t0)
