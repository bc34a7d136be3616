"""Registered finite-difference checks run by ``idiomadv gradcheck``."""

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EncodedBatch
from .model import EncoderModel, ModelConfig, init_model, parameter_shapes
from .training import AdvConfig, _ascend, cross_entropy, symmetric_kl, total_loss_smart

H = 1e-5
PRIMITIVE_TOL = 1e-4
SMART_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    seconds: float


def _rng():
    return np.random.default_rng(20220314)


def _weights(shape):
    # fixed random projection so every check reduces to a scalar
    return np.random.default_rng(99).normal(size=shape)


def _primitive_checks():
    r = _rng()
    a34, b45 = r.normal(size=(3, 4)), r.normal(size=(4, 5))
    x235 = r.normal(size=(2, 3, 5))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    w235 = _weights((2, 3, 5))
    w34 = _weights((3, 4))
    w2336 = _weights((2, 3, 6))
    return [
        ("add", lambda a, b: T.sum((a + b) * w235), [x235, r.normal(size=(5,))]),
        ("sub", lambda a, b: T.sum((a - b) * w235), [x235, r.normal(size=(3, 1))]),
        ("mul", lambda a, b: T.sum(a * b * w235), [x235, r.normal(size=(3, 5))]),
        ("matmul", lambda a, b: T.sum(T.matmul(a, b)), [a34, b45]),
        ("matmul_batched", lambda a, b: T.sum(T.matmul(a, b) * _weights((2, 3, 4))),
         [r.normal(size=(2, 3, 5)), r.normal(size=(5, 4))]),
        ("softmax", lambda x: T.sum(T.softmax(x, axis=-1) * w235), [x235]),
        ("softmax_axis1", lambda x: T.sum(T.softmax(x, axis=1) * w235), [x235]),
        ("layer_norm", lambda x, g, b: T.sum(T.layer_norm(x, g, b) * w2336),
         [r.normal(size=(2, 3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
        ("gelu", lambda x: T.sum(T.gelu(x) * w235), [x235]),
        ("embedding", lambda w: T.sum(T.embedding(w, ids) * _weights((2, 3, 4))),
         [r.normal(size=(4, 4))]),
        ("reshape", lambda x: T.sum(T.reshape(x, (6, 5)) * _weights((6, 5))), [x235]),
        ("transpose", lambda x: T.sum(T.transpose(x, (2, 0, 1)) * _weights((5, 2, 3))), [x235]),
        ("sum_axis", lambda x: T.sum(T.sum(x, axis=1) * _weights((2, 5))), [x235]),
        ("mean", lambda x: T.sum(T.mean(x, axis=(0, 2), keepdims=True) * _weights((1, 3, 1))), [x235]),
        ("log", lambda x: T.sum(T.log(x) * w34), [pos]),
    ]


def tiny_setup():
    """Small model plus a 2-example batch with one padded position."""
    cfg = ModelConfig(vocab_size=12, d_model=4, n_layers=1, n_heads=2, d_ff=8,
                      max_len=8, dropout_rate=0.0, seed=3)
    model = init_model(cfg)
    r = np.random.default_rng(5)
    # scale weights up so the check exercises non-trivial curvature
    for p in model.params.values():
        if p.data.ndim == 2:
            p.data = r.normal(0.0, 0.5, size=p.data.shape)
    ids = np.array([[2, 5, 7, 3, 9, 3], [2, 6, 3, 8, 3, 0]])
    batch = EncodedBatch(ids, (ids != 0).astype(np.int64), np.array([0, 1]))
    return cfg, model, batch


def _with_params(cfg, tensors):
    names = [n for n, _ in parameter_shapes(cfg)]
    return EncoderModel(cfg, dict(zip(names, tensors)))


def _model_checks():
    cfg, model, batch = tiny_setup()
    point = [p.data.copy() for p in model.parameters()]

    def classifier_loss(*params):
        m = _with_params(cfg, params)
        return cross_entropy(m.logits(m.embed(batch), batch), batch.labels)

    emb0 = model.embed(batch).data.copy()

    def encoder_sum(emb):
        from .model import encoder_forward

        return T.sum(encoder_forward(model, emb, batch.attention_mask) * _weights(emb0.shape))

    adv = AdvConfig(epsilon=0.05, eta=0.02, sigma=0.01, k_steps=2, alpha=1.0)
    captured = []
    clean = model.logits(model.embed(batch), batch)
    _, delta = _ascend(model, batch, adv, lambda lg: symmetric_kl(lg, clean.detach()),
                       np.random.default_rng(1), None, lambda d, m: captured.append(d))

    def smart_loss(*params):
        m = _with_params(cfg, params)
        x = m.embed(batch)
        clean_logits = m.logits(x, batch)
        reg = symmetric_kl(m.logits(x + delta, batch), clean_logits)
        return total_loss_smart(cross_entropy(clean_logits, batch.labels), reg, adv.alpha)

    return [
        ("classifier_ce_loss", classifier_loss, point, PRIMITIVE_TOL),
        ("encoder_wrt_embeddings", encoder_sum, [emb0], PRIMITIVE_TOL),
        ("smart_total_loss_theta", smart_loss, point, SMART_TOL),
    ]


def registered_checks():
    checks = [(name, fn, pt, PRIMITIVE_TOL) for name, fn, pt in _primitive_checks()]
    return checks + _model_checks()


def run_suite(fault=None):
    T.inject_fault(fault)
    try:
        results = []
        for name, fn, point, tol in registered_checks():
            start = time.perf_counter()
            report = T.grad_check(fn, point, h=H, tol=tol)
            results.append(CheckResult(name, report.max_rel_err, tol, report.passed,
                                       time.perf_counter() - start))
        return results
    finally:
        T.inject_fault(None)
