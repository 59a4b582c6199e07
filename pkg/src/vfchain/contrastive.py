"""Supervised cross-contrastive loss, small encoders and their training.

The loss over a batch of N same-identity (voice, face) pairs is

    L = -(1/N) * sum_i log( exp(z_vi . z_fi / tau) / sum_j exp(z_vi . z_fj / tau) )

i.e. softmax cross-entropy with voice rows as anchors and the matching
face as the positive.  ``symmetric=True`` averages it with the
face-anchored direction.  Gradients are derived by hand so training needs
nothing beyond numpy.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError
from .rng import stage_rng
from .vectorstore import EmbeddingRecord, Modality, cosine_similarity, format_real

CHECKPOINT_HEADER = "#scc-encoder v1"


# --- loss ------------------------------------------------------------------


def _as_batch(voice_embs, face_embs):
    zv = np.asarray(voice_embs, dtype=np.float64)
    zf = np.asarray(face_embs, dtype=np.float64)
    if zv.ndim != 2 or zf.ndim != 2:
        raise DimensionError("embeddings must be 2-D arrays (N x d)")
    if zv.shape != zf.shape:
        raise DimensionError(f"voice batch {zv.shape} and face batch {zf.shape} differ")
    if zv.shape[0] == 0:
        raise ConfigError("contrastive loss needs at least one pair")
    return zv, zf


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero embedding")
    return x / norms, norms


def _normalize_backward(grad_z, z, norms):
    # d(x/|x|) = (I - z z^T) / |x|
    return (grad_z - z * np.sum(grad_z * z, axis=1, keepdims=True)) / norms


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _loss_and_logit_grad(logits, symmetric):
    n = logits.shape[0]
    idx = np.arange(n)
    logp_row = _log_softmax(logits)
    loss = -logp_row[idx, idx].mean()
    g = np.exp(logp_row)
    g[idx, idx] -= 1.0
    g /= n
    if symmetric:
        logp_col = _log_softmax(logits.T)
        loss = 0.5 * (loss - logp_col[idx, idx].mean())
        gc = np.exp(logp_col)
        gc[idx, idx] -= 1.0
        gc /= n
        g = 0.5 * (g + gc.T)
    return float(loss), g


def scc_loss(voice_embs, face_embs, tau: float, normalize: bool = True, symmetric: bool = False) -> float:
    """Cross-contrastive loss of a batch; row i of both inputs is one identity."""
    _check_tau(tau)
    zv, zf = _as_batch(voice_embs, face_embs)
    if normalize:
        zv, _ = _unit_rows(zv)
        zf, _ = _unit_rows(zf)
    loss, _ = _loss_and_logit_grad(zv @ zf.T / tau, symmetric)
    return max(0.0, loss)


def scc_loss_grad(voice_embs, face_embs, tau: float, normalize: bool = True, symmetric: bool = False):
    """Analytic gradient of :func:`scc_loss` w.r.t. both input batches.

    Returns ``(grad_voice, grad_face)`` with the shapes of the inputs.
    """
    _check_tau(tau)
    xv, xf = _as_batch(voice_embs, face_embs)
    if normalize:
        zv, nv = _unit_rows(xv)
        zf, nf = _unit_rows(xf)
    else:
        zv, zf = xv, xf
    _, g = _loss_and_logit_grad(zv @ zf.T / tau, symmetric)
    grad_v = g @ zf / tau
    grad_f = g.T @ zv / tau
    if normalize:
        grad_v = _normalize_backward(grad_v, zv, nv)
        grad_f = _normalize_backward(grad_f, zf, nf)
    return grad_v, grad_f


def initial_score(v_emb, f_emb) -> float:
    """Distance-like pair score ``1 - cos``; 0 is a perfect match, 2 the worst."""
    return 1.0 - cosine_similarity(v_emb, f_emb)


# --- encoders --------------------------------------------------------------


class EncoderKind(str, enum.Enum):
    LINEAR = "linear"
    ONE_HIDDEN = "one_hidden"


@dataclass(frozen=True, eq=False)
class Encoder:
    """Linear map, or linear -> tanh -> linear, applied to raw feature rows.

    ``weights`` holds ``(W,)`` for linear encoders (shape out x in) and
    ``(W1, W2)`` for one-hidden encoders (hidden x in, out x hidden).
    """

    kind: EncoderKind
    weights: tuple
    output_normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        expected = 1 if self.kind is EncoderKind.LINEAR else 2
        if len(ws) != expected or any(w.ndim != 2 for w in ws):
            raise DimensionError(f"{self.kind.value} encoder needs {expected} weight matrices")
        if expected == 2 and ws[1].shape[1] != ws[0].shape[0]:
            raise DimensionError("hidden dimensions of the two layers disagree")
        if not all(np.all(np.isfinite(w)) for w in ws):
            raise DegenerateInputError("encoder weights must be finite")
        for w in ws:
            w.setflags(write=False)
        object.__setattr__(self, "weights", ws)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[0] if self.kind is EncoderKind.ONE_HIDDEN else 0

    def __eq__(self, other):
        if not isinstance(other, Encoder):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.output_normalize == other.output_normalize
            and len(self.weights) == len(other.weights)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
        )

    __hash__ = None

    def forward(self, x: np.ndarray):
        """Pre-normalization outputs for a batch plus the hidden activations."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"encoder expects inputs of dimension {self.input_dim}, got shape {x.shape}")
        if self.kind is EncoderKind.LINEAR:
            return x @ self.weights[0].T, None
        h = np.tanh(x @ self.weights[0].T)
        return h @ self.weights[1].T, h

    def encode_batch(self, x) -> np.ndarray:
        y, _ = self.forward(x)
        if self.output_normalize:
            norms = np.linalg.norm(y, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise DegenerateInputError("encoder produced a zero vector; cannot normalize")
            y = y / norms
        return y


def encode(enc: Encoder, raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise DimensionError("encode expects a single 1-D vector")
    return enc.encode_batch(raw[None, :])[0]


def init_encoder(rng: np.random.Generator, kind, input_dim: int, output_dim: int, hidden_dim: int = 32,
                 output_normalize: bool = True) -> Encoder:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    kind = EncoderKind(kind)

    def layer(fan_out, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    if kind is EncoderKind.LINEAR:
        return Encoder(kind, (layer(output_dim, input_dim),), output_normalize)
    return Encoder(kind, (layer(hidden_dim, input_dim), layer(output_dim, hidden_dim)), output_normalize)


def embed_records(records: Sequence[EmbeddingRecord], voice_enc: Encoder, face_enc: Encoder) -> list[EmbeddingRecord]:
    """Apply the modality's encoder to every raw record, keeping ids and labels."""
    out: list[EmbeddingRecord | None] = [None] * len(records)
    for modality, enc in ((Modality.VOICE, voice_enc), (Modality.FACE, face_enc)):
        idx = [i for i, r in enumerate(records) if r.modality is modality]
        if not idx:
            continue
        emb = enc.encode_batch(np.stack([records[i].vector for i in idx]))
        for i, row in zip(idx, emb):
            r = records[i]
            out[i] = EmbeddingRecord(r.sample_id, r.modality, r.identity, row)
    return out


# --- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    batch_size: int = 16
    learning_rate: float = 0.5
    epochs: int = 200
    seed: int = 0
    normalize_in_loss: bool = True
    symmetric_loss: bool = False
    kind: EncoderKind = EncoderKind.LINEAR
    embed_dim: int = 16
    hidden_dim: int = 32
    output_normalize: bool = True
    tie_final: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.embed_dim < 2 or (self.kind is EncoderKind.ONE_HIDDEN and self.hidden_dim < 1):
            raise ConfigError("embedding dimension must be at least 2 and hidden_dim positive")


class TrainResult(NamedTuple):
    voice: Encoder
    face: Encoder
    losses: list


def _group_by_identity(records, modality):
    groups = defaultdict(list)
    for r in records:
        if r.modality is not modality:
            raise ConfigError(f"record {r.sample_id} is not a {modality.value} record")
        if r.identity is None:
            raise ConfigError(f"training record {r.sample_id} has no identity label")
        groups[r.identity].append(r.vector)
    return {k: np.stack(v) for k, v in groups.items()}


def _backward(enc_w, kind, x, h, grad_y):
    if kind is EncoderKind.LINEAR:
        return [grad_y.T @ x]
    w2 = enc_w[1]
    grad_w2 = grad_y.T @ h
    grad_a = (grad_y @ w2) * (1.0 - h * h)
    return [grad_a.T @ x, grad_w2]


def train_encoders(raw_voice: Sequence[EmbeddingRecord], raw_face: Sequence[EmbeddingRecord],
                   config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a voice and a face encoder by plain gradient descent on the SCC loss.

    Each epoch draws one voice and one face sample per identity, shuffles
    the identities and steps once per batch of ``batch_size`` identities,
    so no batch contains two pairs of the same person.
    """
    voice_groups = _group_by_identity(raw_voice, Modality.VOICE)
    face_groups = _group_by_identity(raw_face, Modality.FACE)
    identities = sorted(set(voice_groups) & set(face_groups))
    if len(identities) < 2:
        raise ConfigError("training needs at least two identities present in both modalities")
    dv = next(iter(voice_groups.values())).shape[1]
    df = next(iter(face_groups.values())).shape[1]
    if config.tie_final and config.kind is EncoderKind.LINEAR and dv != df:
        raise ConfigError("tying linear encoders requires equal raw dimensions")

    init_rng = stage_rng(config.seed, "train/init")
    batch_rng = stage_rng(config.seed, "train/batches")
    voice = init_encoder(init_rng, config.kind, dv, config.embed_dim, config.hidden_dim, config.output_normalize)
    face = init_encoder(init_rng, config.kind, df, config.embed_dim, config.hidden_dim, config.output_normalize)
    wv = [w.copy() for w in voice.weights]
    wf = [w.copy() for w in face.weights]
    if config.tie_final:
        wf[-1] = wv[-1]

    n_id = len(identities)
    batches_per_epoch = max(1, n_id // config.batch_size)
    losses = []
    for _ in range(config.epochs):
        xv = np.stack([voice_groups[k][batch_rng.integers(len(voice_groups[k]))] for k in identities])
        xf = np.stack([face_groups[k][batch_rng.integers(len(face_groups[k]))] for k in identities])
        order = batch_rng.permutation(n_id)
        epoch_loss = 0.0
        # a short tail batch is folded into the last full one
        for chunk in np.array_split(order, batches_per_epoch):
            enc_v = Encoder(config.kind, wv, False)
            enc_f = Encoder(config.kind, wf, False)
            yv, hv = enc_v.forward(xv[chunk])
            yf, hf = enc_f.forward(xf[chunk])
            if config.output_normalize:
                zv, nv = _unit_rows(yv)
                zf, nf = _unit_rows(yf)
            else:
                zv, zf = yv, yf
            epoch_loss += scc_loss(zv, zf, config.tau, config.normalize_in_loss, config.symmetric_loss) * len(chunk)
            gzv, gzf = scc_loss_grad(zv, zf, config.tau, config.normalize_in_loss, config.symmetric_loss)
            if config.output_normalize:
                gzv = _normalize_backward(gzv, zv, nv)
                gzf = _normalize_backward(gzf, zf, nf)
            grads_v = _backward(wv, config.kind, xv[chunk], hv, gzv)
            grads_f = _backward(wf, config.kind, xf[chunk], hf, gzf)
            if config.tie_final:
                shared = grads_v[-1] + grads_f[-1]
                grads_v[-1] = shared
                grads_f[-1] = np.zeros_like(shared)
            for w, g in zip(wv, grads_v):
                w -= config.learning_rate * g
            for w, g in zip(wf, grads_f):
                if w is wv[-1] and config.tie_final:
                    continue
                w -= config.learning_rate * g
        losses.append(epoch_loss / n_id)
        if not all(np.all(np.isfinite(w)) for w in wv + wf):
            raise DegenerateInputError("training diverged (non-finite weights); lower the learning rate")

    return TrainResult(
        Encoder(config.kind, wv, config.output_normalize),
        Encoder(config.kind, wf, config.output_normalize),
        losses,
    )


# --- checkpoint files ------------------------------------------------------


def dumps_encoder(enc: Encoder) -> str:
    lines = [
        CHECKPOINT_HEADER,
        f"kind {enc.kind.value}",
        f"input_dim {enc.input_dim}",
        f"hidden_dim {enc.hidden_dim}",
        f"output_dim {enc.output_dim}",
        f"output_normalize {int(enc.output_normalize)}",
    ]
    for w in enc.weights:
        lines.append(f"matrix {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(format_real(x) for x in row) for row in w)
    return "\n".join(lines) + "\n"


def loads_encoder(text: str, path=None) -> Encoder:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise FormatError(f"expected header {CHECKPOINT_HEADER!r}", path, 1)
    meta = {}
    pos = 1
    for key in ("kind", "input_dim", "hidden_dim", "output_dim", "output_normalize"):
        if pos >= len(lines):
            raise FormatError(f"missing {key!r} line", path, pos + 1)
        parts = lines[pos].split(" ")
        if len(parts) != 2 or parts[0] != key:
            raise FormatError(f"expected '{key} <value>'", path, pos + 1)
        meta[key] = parts[1]
        pos += 1
    try:
        kind = EncoderKind(meta["kind"])
    except ValueError:
        raise FormatError(f"unknown encoder kind {meta['kind']!r}", path, 2) from None
    weights = []
    while pos < len(lines):
        parts = lines[pos].split(" ")
        if len(parts) != 3 or parts[0] != "matrix":
            raise FormatError("expected 'matrix <rows> <cols>'", path, pos + 1)
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError("bad matrix shape", path, pos + 1) from None
        pos += 1
        mat = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines):
                raise FormatError("truncated matrix", path, pos + 1)
            tokens = lines[pos].split(" ")
            if len(tokens) != cols:
                raise FormatError(f"expected {cols} values", path, pos + 1)
            try:
                mat[r] = [float(t) for t in tokens]
            except ValueError:
                raise FormatError("bad real number", path, pos + 1) from None
            pos += 1
        weights.append(mat)
    try:
        enc = Encoder(kind, tuple(weights), meta["output_normalize"] == "1")
    except (DimensionError, DegenerateInputError) as exc:
        raise FormatError(str(exc), path) from None
    try:
        declared = (int(meta["input_dim"]), int(meta["hidden_dim"]), int(meta["output_dim"]))
    except ValueError:
        raise FormatError("dimensions must be integers", path) from None
    if declared != (enc.input_dim, enc.hidden_dim, enc.output_dim):
        raise FormatError("declared dimensions disagree with the weight matrices", path)
    return enc


def write_encoder(path, enc: Encoder):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_encoder(enc))


def read_encoder(path) -> Encoder:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return loads_encoder(fh.read(), path=str(path))
