"""Small post-LN transformer encoder with a first-token classifier head.

The input embedding (token + position) is the point where adversarial
perturbations are injected, so the forward pass is split into
:func:`embed_input` and :func:`logits_from_embeddings`.
"""

import hashlib
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import MAX_SEQ_LEN, Vocab
from .errors import CheckpointError, ConfigError, NumericError, ShapeError

INIT_STD = 0.02
MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    n_classes: int = 2
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_classes != 2:
            raise ConfigError("n_classes must be 2")
        if min(self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.max_len) < 1:
            raise ConfigError("model sizes must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_len > MAX_SEQ_LEN:
            raise ConfigError(f"max_len must be <= {MAX_SEQ_LEN}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        return self


def parameter_shapes(cfg):
    """Parameter names and shapes, in the fixed checkpoint order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_len, d))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.w{name}", (d, d)), (p + f"attn.b{name}", (d,))]
        shapes += [(p + "ln1.gain", (d,)), (p + "ln1.bias", (d,))]
        shapes += [(p + "ffn.w1", (d, f)), (p + "ffn.b1", (f,))]
        shapes += [(p + "ffn.w2", (f, d)), (p + "ffn.b2", (d,))]
        shapes += [(p + "ln2.gain", (d,)), (p + "ln2.bias", (d,))]
    shapes += [("cls.w", (d, cfg.n_classes)), ("cls.b", (cfg.n_classes,))]
    return shapes


def parameter_count(cfg):
    """Closed form of ``sum(prod(shape))`` over :func:`parameter_shapes`."""
    d, f, L = cfg.d_model, cfg.d_ff, cfg.n_layers
    embed = (cfg.vocab_size + cfg.max_len) * d
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f + f * d + d)
    return embed + L * per_layer + d * cfg.n_classes + cfg.n_classes


@dataclass
class ClassifierOutput:
    logits: T.Tensor
    probs: np.ndarray
    input_embeddings: T.Tensor = None

    @property
    def clean_probs(self):
        return self.probs


class EncoderModel:
    def __init__(self, config, params, vocab=None):
        self.config = config
        self.params = params
        self.vocab = vocab

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=np.float64)

    # interface used by the adversarial training routines
    def embed(self, batch):
        return embed_input(self, batch)

    def logits(self, embeddings, batch, dropout_rng=None):
        return logits_from_embeddings(self, embeddings, batch, dropout_rng)

    def perturbation_mask(self, batch):
        return np.asarray(batch.attention_mask, dtype=np.float64)[:, :, None]


def init_model(config, vocab=None):
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = T.Tensor(data, requires_grad=True)
    if vocab is not None and len(vocab) > config.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} tokens but vocab_size={config.vocab_size}")
    return EncoderModel(config, params, vocab)


def embed_input(model, batch):
    ids = np.asarray(batch.token_ids)
    if ids.shape[1] > model.config.max_len:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {model.config.max_len}")
    tok = T.embedding(model.params["tok_emb"], ids)
    pos = T.embedding(model.params["pos_emb"], np.arange(ids.shape[1]))
    return tok + pos


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def _attention(model, x, prefix, bias, rng, attn_out):
    cfg = model.config
    P = model.params
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H

    def heads(name):
        y = x @ P[prefix + f"attn.w{name}"] + P[prefix + f"attn.b{name}"]
        return T.transpose(T.reshape(y, (B, L, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + bias
    attn = T.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(attn.data)
    ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (B, L, d))
    out = ctx @ P[prefix + "attn.wo"] + P[prefix + "attn.bo"]
    return _dropout(out, cfg.dropout_rate, rng)


def encoder_forward(model, embeddings, mask, dropout_rng=None, attn_out=None):
    """Run the layer stack. ``mask`` is [B, T] with 1 on real tokens."""
    cfg = model.config
    P = model.params
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != embeddings.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match embeddings {embeddings.shape}")
    bias = ((1.0 - mask) * MASK_BIAS)[:, None, None, :]
    x = embeddings
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        try:
            x = T.layer_norm(x + _attention(model, x, p, bias, dropout_rng, attn_out),
                             P[p + "ln1.gain"], P[p + "ln1.bias"])
            h = T.gelu(x @ P[p + "ffn.w1"] + P[p + "ffn.b1"])
            h = _dropout(h @ P[p + "ffn.w2"] + P[p + "ffn.b2"], cfg.dropout_rate, dropout_rng)
            x = T.layer_norm(x + h, P[p + "ln2.gain"], P[p + "ln2.bias"])
        except NumericError as exc:
            raise NumericError(f"encoder layer {i}: {exc}") from exc
    return x


def classify(model, encoded):
    """Logits from the first ([CLS]) position."""
    if encoded.shape[1] < 1:
        raise ShapeError("classify needs at least one position")
    pick = np.zeros((1, encoded.shape[1], 1))
    pick[0, 0, 0] = 1.0
    pooled = T.sum(encoded * pick, axis=1)
    logits = pooled @ model.params["cls.w"] + model.params["cls.b"]
    return ClassifierOutput(logits, T.softmax(logits.detach(), axis=-1).data)


def logits_from_embeddings(model, embeddings, batch, dropout_rng=None):
    encoded = encoder_forward(model, embeddings, batch.attention_mask, dropout_rng)
    return classify(model, encoded).logits


def forward(model, batch, delta=None, dropout_rng=None):
    emb = embed_input(model, batch)
    x = emb if delta is None else emb + delta
    out = classify(model, encoder_forward(model, x, batch.attention_mask, dropout_rng))
    out.input_embeddings = emb
    return out


def predict(model, batch):
    """Argmax predictions; exact ties go to class 0."""
    logits = forward(model, batch).logits.data
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout (little-endian):
#   8 bytes   magic b"IDADVCK\0"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 "key=value" lines: every ModelConfig field, then an
#             optional "vocab=" line of space-separated tokens in id order
#   payload   float32 blobs, one per parameter, in parameter_shapes() order
#   32 bytes  SHA-256 of the payload

MAGIC = b"IDADVCK\0"
FORMAT_VERSION = 1
_DIGEST = 32


def save_checkpoint(model, config, path):
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(ModelConfig)]
    if model.vocab is not None:
        lines.append("vocab=" + " ".join(model.vocab.tokens))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(
        np.asarray(model.params[name].data, dtype="<f4").tobytes()
        for name, _ in parameter_shapes(config)
    )
    blob = (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(header))
        + header
        + payload
        + hashlib.sha256(payload).digest()
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def _parse_header(text):
    values = dict(line.split("=", 1) for line in text.splitlines() if line)
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            raise CheckpointError(f"checkpoint header lacks {f.name}")
        caster = float if f.type in (float, "float") else int
        kwargs[f.name] = caster(values[f.name])
    vocab = values["vocab"].split(" ") if "vocab" in values else None
    return ModelConfig(**kwargs), vocab


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    if len(blob) < start + hlen + _DIGEST:
        raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        config, tokens = _parse_header(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    payload = blob[start + hlen : -_DIGEST]
    if hashlib.sha256(payload).digest() != blob[-_DIGEST:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        config.validate()
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid config in header ({exc})") from exc

    shapes = parameter_shapes(config)
    expected = 4 * sum(int(np.prod(s)) for _, s in shapes)
    if expected != len(payload):
        raise CheckpointError(
            f"{path}: header/payload mismatch: config (vocab_size={config.vocab_size}) needs "
            f"{expected} bytes of parameters, payload holds {len(payload)}"
        )
    vocab = None
    if tokens is not None:
        if len(tokens) > config.vocab_size:
            raise CheckpointError(
                f"{path}: vocab mismatch: {len(tokens)} tokens for vocab_size={config.vocab_size}"
            )
        vocab = Vocab(tokens)
    params, offset = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float64)
        params[name] = T.Tensor(arr.reshape(shape), requires_grad=True)
        offset += 4 * n
    return EncoderModel(config, params, vocab), config
