"""Fine-tuning loops: plain cross-entropy, supervised adversarial, and SMART.

The adversarial routines perturb the input embedding of any model exposing

* ``embed(batch) -> Tensor`` (the clean input x, differentiable in theta),
* ``logits(embeddings, batch, dropout_rng=None) -> Tensor`` of shape [B, 2],
* ``perturbation_mask(batch)`` broadcastable to the embedding, or ``None``.

The inner maximisation runs projected gradient ascent on delta inside an
l-infinity ball, with each example's gradient scaled by its own max-norm.
"""

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import get_split, make_batches, training_pool
from .errors import ConfigError, ContractError, NumericError, TrainingAborted

METHODS = ("standard", "adv_supervised", "smart")
GRAD_FLOOR = 1e-12


@dataclass
class AdvConfig:
    epsilon: float = 1e-5
    eta: float = 1e-3
    sigma: float = 1e-5
    k_steps: int = 1
    alpha: float = 1.0
    norm: str = "linf"

    def validate(self):
        if not self.epsilon > 0:
            raise ConfigError("adv.epsilon must be > 0")
        if not self.eta > 0:
            raise ConfigError("adv.eta must be > 0")
        if self.sigma < 0 or self.k_steps < 0 or self.alpha < 0:
            raise ConfigError("adv.sigma, adv.k_steps and adv.alpha must be >= 0")
        if self.norm != "linf":
            raise ConfigError("only the linf perturbation norm is supported")
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 10
    warmup_ratio: float = 0.1
    grad_clip_norm: float = 1.0
    seed: int = 0
    method: str = "standard"
    eval_batch_size: int = 64

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("train.warmup_ratio must lie in [0, 1)")
        if not self.grad_clip_norm > 0:
            raise ConfigError("train.grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train.batch_size and train.max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        return self


def derive_seed(seed, role, *extra):
    """Independent stream seed for ``role`` (e.g. "shuffle", "noise")."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(role.encode()), *map(int, extra)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ContractError("labels must be a vector matching the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes)[labels]
    logp = T.log(T.softmax(logits, axis=-1))
    return T.sum(logp * onehot) * (-1.0 / logits.shape[0])


def symmetric_kl(p_logits, q_logits):
    """Batch mean of KL(p||q) + KL(q||p) between the two softmax distributions."""
    if p_logits.shape != q_logits.shape:
        raise ContractError("symmetric_kl operands differ in shape")
    p = T.softmax(p_logits, axis=-1)
    q = T.softmax(q_logits, axis=-1)
    return T.sum((p - q) * (T.log(p) - T.log(q))) * (1.0 / p_logits.shape[0])


def total_loss_smart(clean_loss, regularizer, alpha):
    return clean_loss + regularizer * float(alpha)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def _apply_mask(arr, mask):
    if mask is None:
        return arr
    return np.where(np.broadcast_to(mask, arr.shape) > 0, arr, 0.0)


def init_perturbation(shape, sigma, rng, mask=None):
    """delta_0 = sigma * N(0, 1), zero at masked positions, tape-enabled."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    noise = rng.standard_normal(shape) * sigma
    return T.Tensor(_apply_mask(noise, mask), requires_grad=True)


def project_linf(delta, epsilon):
    if not epsilon > 0:
        raise ContractError("epsilon must be > 0")
    if isinstance(delta, T.Tensor):
        return T.Tensor(np.clip(delta.data, -epsilon, epsilon), requires_grad=delta.requires_grad)
    return np.clip(delta, -epsilon, epsilon)


def pgd_ascent_step(delta, grad_delta, eta, epsilon, mask=None):
    """One projected ascent step with per-example max-norm scaling.

    Examples whose gradient max-norm over unmasked positions is below 1e-12
    keep their current delta.
    """
    delta = np.asarray(delta, dtype=np.float64)
    g = np.asarray(grad_delta, dtype=np.float64)
    if delta.shape != g.shape:
        raise ContractError("delta and gradient shapes differ")
    # a 1-D delta is a single example; otherwise axis 0 indexes examples
    axes = tuple(range(1, g.ndim)) if g.ndim > 1 else None
    norm = np.abs(_apply_mask(g, mask)).max(axis=axes, keepdims=True)
    live = norm >= GRAD_FLOOR
    step = np.where(live, g / np.where(live, norm, 1.0), 0.0)
    return _apply_mask(np.clip(delta + eta * step, -epsilon, epsilon), mask)


def _ascend(model, batch, adv, objective, rng, embeddings, hook):
    """Run the inner maximisation; returns ``(x, delta)`` with delta a constant array."""
    x = model.embed(batch) if embeddings is None else embeddings
    x0 = x.detach()
    mask = model.perturbation_mask(batch)
    delta = project_linf(init_perturbation(x.shape, adv.sigma, rng, mask).data, adv.epsilon)
    if hook is not None:
        hook(delta, mask)
    for _ in range(adv.k_steps):
        d = T.Tensor(delta, requires_grad=True)
        value = objective(model.logits(x0 + d, batch))
        T.backward(value, inputs=[d])
        delta = pgd_ascent_step(delta, d.grad, adv.eta, adv.epsilon, mask)
        if hook is not None:
            hook(delta, mask)
    return x, delta


def supervised_adv_loss(model, batch, adv, rng=0, embeddings=None, hook=None):
    """Cross-entropy at the approximate worst-case delta; delta is a constant in the result."""
    labels = batch.labels
    x, delta = _ascend(model, batch, adv, lambda lg: cross_entropy(lg, labels), rng, embeddings, hook)
    return cross_entropy(model.logits(x + delta, batch), labels)


def vat_regularizer(model, batch, adv, rng=0, clean_logits=None, embeddings=None, hook=None):
    """Worst-case symmetric KL between perturbed and clean predictions.

    The ascent treats the clean distribution as fixed; the returned value keeps
    theta-gradients through both the perturbed and the clean logits. Neither
    forward pass applies dropout. Labels are never read.
    """
    x = model.embed(batch) if embeddings is None else embeddings
    if clean_logits is None:
        clean_logits = model.logits(x, batch)
    target = clean_logits.detach()
    x, delta = _ascend(model, batch, adv, lambda lg: symmetric_kl(lg, target), rng, x, hook)
    return symmetric_kl(model.logits(x + delta, batch), clean_logits)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def lr_schedule(step, total_steps, peak_lr, warmup_ratio):
    """Linear warm-up to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    # the 1e-9 guard keeps e.g. ceil(0.1 * 30) at 3 despite float round-up
    warmup = math.ceil(warmup_ratio * total_steps - 1e-9)
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def global_norm(grads):
    return math.sqrt(math.fsum(float(np.dot(g.ravel(), g.ravel())) for g in grads))


def clip_grad_global_norm(grads, max_norm):
    if not max_norm > 0:
        raise ContractError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = None

    def records(self):
        """Step and epoch records interleaved in the order they happened."""
        by_epoch = {}
        for s in self.steps:
            by_epoch.setdefault(s["epoch"], []).append(s)
        out = []
        for e in range(max([r["epoch"] for r in self.steps + self.epochs], default=-1) + 1):
            out.extend(by_epoch.get(e, []))
            out.extend(r for r in self.epochs if r["epoch"] == e)
        return out

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    def losses(self):
        return [s["total_loss"] for s in self.steps]


def _step_losses(model, batch, cfg, adv, dropout_rng, noise_rng, hook):
    emb = model.embed(batch)
    clean_logits = model.logits(emb, batch, dropout_rng)
    clean = cross_entropy(clean_logits, batch.labels)
    if cfg.method == "standard":
        return clean, clean, 0.0
    if cfg.method == "adv_supervised":
        adv_loss = supervised_adv_loss(model, batch, adv, noise_rng, embeddings=emb, hook=hook)
        return clean, adv_loss, adv_loss.item()
    dropout_active = dropout_rng is not None and getattr(model.config, "dropout_rate", 0.0) > 0
    pair_clean = model.logits(emb, batch) if dropout_active else clean_logits
    reg = vat_regularizer(model, batch, adv, noise_rng, clean_logits=pair_clean, embeddings=emb, hook=hook)
    return clean, total_loss_smart(clean, reg, adv.alpha), reg.item()


def train_run(model, splits, train_cfg, adv_cfg, vocab=None, setting="zero_shot",
              max_len=None, delta_hook=None, log=None):
    """Fine-tune ``model`` on the training pool of ``splits``.

    Returns the model holding the parameters of the epoch with the best dev
    macro-F1 (earliest on ties; last epoch when there is no dev split) and the
    full :class:`TrainHistory`. A non-finite value aborts with
    :class:`TrainingAborted`, which carries the history so far.
    """
    from .evaluation import evaluate_split

    train_cfg.validate()
    adv_cfg.validate()
    vocab = vocab if vocab is not None else model.vocab
    max_len = max_len or model.config.max_len
    records = training_pool(splits, setting)
    if not records:
        raise ConfigError("training split is empty")
    dev = get_split(splits, "dev")

    params = model.parameters()
    state = AdamState.fresh(params)
    dropout_rng = np.random.default_rng(derive_seed(train_cfg.seed, "dropout"))
    noise_rng = np.random.default_rng(derive_seed(train_cfg.seed, "noise"))
    n_batches = math.ceil(len(records) / train_cfg.batch_size)
    total_steps = n_batches * train_cfg.max_epochs
    history = TrainHistory()
    best_f1, best_state = -1.0, None
    step = 0

    for epoch in range(train_cfg.max_epochs):
        batches = make_batches(records, vocab, train_cfg.batch_size, max_len,
                               seed=derive_seed(train_cfg.seed, "shuffle", epoch), shuffle=True)
        for batch in batches:
            lr = lr_schedule(step, total_steps, train_cfg.learning_rate, train_cfg.warmup_ratio)
            model.zero_grad()
            try:
                clean, total, adv_term = _step_losses(
                    model, batch, train_cfg, adv_cfg, dropout_rng, noise_rng, delta_hook)
                T.backward(total)
            except NumericError as exc:
                raise TrainingAborted(f"step {step}: {exc}", history, step) from exc
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            grads, pre_norm = clip_grad_global_norm(grads, train_cfg.grad_clip_norm)
            adam_step(params, grads, state, lr)
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingAborted(f"step {step}: non-finite parameters", history, step)
            history.steps.append({
                "type": "step",
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "clean_loss": clean.item(),
                "adv_term": adv_term,
                "total_loss": total.item(),
                "grad_norm_pre_clip": pre_norm,
                "grad_norm_post_clip": global_norm(grads),
            })
            step += 1

        record = {"type": "epoch", "epoch": epoch}
        if dev is not None and len(dev):
            report = evaluate_split(model, dev, vocab, batch_size=train_cfg.eval_batch_size,
                                    max_len=max_len)
            record["dev_macro_f1"] = report.macro_f1
            record["dev_accuracy"] = report.accuracy
            if report.macro_f1 > best_f1:
                best_f1, best_state = report.macro_f1, model.state()
                history.best_epoch = epoch
        record["best_epoch"] = history.best_epoch
        history.epochs.append(record)
        if log is not None:
            log(f"epoch {epoch}: " + ", ".join(f"{k}={v}" for k, v in record.items() if k != "type"))

    if best_state is not None:
        model.load_state(best_state)
    else:
        history.best_epoch = train_cfg.max_epochs - 1
    return model, history
