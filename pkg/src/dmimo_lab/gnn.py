"""Edge-centric message-passing GNN precoder with hand-written gradients.

Each AP-UE link (m, k) carries an embedding ``e[m, k]``. One layer computes

    z[m, k] = e[m, k] W_self
              + mean_{k' != k} e[m, k'] W_ap_agg      (context of AP m)
              + mean_{m' != m} e[m', k] W_ue_agg      (context of UE k)
              + b
    e'[m, k] = leaky_relu(z[m, k])

with an empty mean taken as zero. A linear head maps the last embedding to
``(Re, Im)`` of the raw precoder, which is scaled to total power ``P``.
Weights are stored as (fan_in, fan_out) matrices acting on row vectors.

The training loss is the negative batch-mean sum rate in nats; gradients
are derived by hand through the rate expression, the power normalization,
the head and every layer.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._jsonio import dumps17
from .numkit import AdamState, RngStream, adam_step
from .precoders import ZeroChannel, sum_rate

log = logging.getLogger(__name__)

MODEL_FORMAT = "dmimo-gnn"
MODEL_VERSION = 1
LAYER_KEYS = ("W_self", "W_ap_agg", "W_ue_agg", "b")
HEAD_KEYS = ("W", "b")


class ModelFormatError(ValueError):
    """A model file is malformed, truncated or from another version."""


@dataclass
class GnnModel:
    """Parameters of the precoding GNN.

    ``layers`` holds one dict per message-passing layer (keys ``LAYER_KEYS``);
    ``head`` maps hidden features to the real and imaginary precoder parts.
    """

    layers: list
    head: dict
    leaky_slope: float = 0.01
    input_scale: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_dim(self) -> int:
        return self.head["W"].shape[0]

    def blocks(self) -> list:
        """Parameter blocks in freeze-mask order: layers then head."""
        return [*self.layers, self.head]

    def copy(self) -> "GnnModel":
        return GnnModel(
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            {k: v.copy() for k, v in self.head.items()},
            self.leaky_slope,
            self.input_scale,
        )

    def n_params(self) -> int:
        return sum(v.size for blk in self.blocks() for v in blk.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, GnnModel):
            return NotImplemented
        if (self.n_layers, self.hidden_dim) != (other.n_layers, other.hidden_dim):
            return False
        if (self.leaky_slope, self.input_scale) != (other.leaky_slope, other.input_scale):
            return False
        return all(
            np.array_equal(a[k], b[k]) for a, b in zip(self.blocks(), other.blocks()) for k in a
        )


def init_model(rng: RngStream, n_layers: int = 8, hidden_dim: int = 64,
               leaky_slope: float = 0.01, input_scale: float = 1.0,
               head_std: float = 1e-2) -> GnnModel:
    """He-style initialization over the concatenated (self, AP, UE) fan-in."""
    if n_layers < 1 or hidden_dim < 1:
        raise ValueError("n_layers and hidden_dim must be >= 1")
    layers = []
    d_in = 2
    for i in range(n_layers):
        r = rng.child(f"layer{i}")
        std = math.sqrt(2.0 / (3 * d_in))
        layers.append({
            "W_self": std * r.child("self").normal((d_in, hidden_dim)),
            "W_ap_agg": std * r.child("ap").normal((d_in, hidden_dim)),
            "W_ue_agg": std * r.child("ue").normal((d_in, hidden_dim)),
            "b": np.zeros(hidden_dim),
        })
        d_in = hidden_dim
    head = {"W": head_std * rng.child("head").normal((hidden_dim, 2)), "b": np.zeros(2)}
    return GnnModel(layers, head, float(leaky_slope), float(input_scale))


def fit_input_scale(H) -> float:
    """``1 / RMS(|H|)`` over a stack of channels."""
    rms = math.sqrt(float(np.mean(np.abs(np.asarray(H)) ** 2)))
    if rms == 0:
        raise ZeroChannel("cannot fit an input scale on all-zero channels")
    return 1.0 / rms


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _exclusive_mean(E, axis, exact=True):
    """Mean over the other entries along ``axis``; zeros if the axis has length 1.

    With ``exact`` the axis total is summed in sorted order, which makes the
    result invariant (bit for bit) under permutations along that axis.
    """
    n = E.shape[axis]
    if n == 1:
        return np.zeros_like(E)
    total = (np.sort(E, axis=axis) if exact else E).sum(axis=axis, keepdims=True)
    return (total - E) / (n - 1)


def _features(model, H):
    return model.input_scale * np.stack([H.real, H.imag], axis=-1)


def _forward(model: GnnModel, H, P, keep_cache=False):
    E = _features(model, H)
    cache = []
    slope = model.leaky_slope
    for layer in model.layers:
        A_ap = _exclusive_mean(E, axis=2)
        A_ue = _exclusive_mean(E, axis=1)
        Z = E @ layer["W_self"] + A_ap @ layer["W_ap_agg"] + A_ue @ layer["W_ue_agg"] + layer["b"]
        if keep_cache:
            cache.append((E, A_ap, A_ue, Z))
        E = np.where(Z > 0, Z, slope * Z)
    out = E @ model.head["W"] + model.head["b"]
    V = out[..., 0] + 1j * out[..., 1]
    power = np.sort((np.abs(V) ** 2).reshape(V.shape[0], -1), axis=1).sum(axis=1)
    if np.any(power == 0):
        raise ZeroChannel("GNN head produced an all-zero precoder")
    norm = np.sqrt(power)[:, None, None]
    W = V * (np.sqrt(P) / norm)
    return W, (cache, E, V, norm)


def _as_batch(H):
    H = np.asarray(getattr(H, "H", H), dtype=complex)
    if H.ndim == 2:
        return H[None], True
    if H.ndim != 3:
        raise ValueError(f"expected (M, K) or (B, M, K) channels, got shape {H.shape}")
    return H, False


def forward(model: GnnModel, H, P: float = 1.0) -> np.ndarray:
    """Precoder for ``H`` (shape (M, K) or (B, M, K)) with ``||W||_F^2 = P``."""
    Hb, single = _as_batch(H)
    if not np.all(np.isfinite(Hb)):
        raise ValueError("channel contains non-finite entries")
    W, _ = _forward(model, Hb, P)
    return W[0] if single else W


def loss_and_grad(model: GnnModel, H, P: float, sigma2: float, trainable=None):
    """Negative batch-mean sum rate (nats) and its gradient.

    Parameters
    ----------
    model : GnnModel
    H : ndarray, shape (B, M, K)
        Batch of channels.
    P, sigma2 : float
        Total transmit power and noise power.
    trainable : sequence of bool, optional
        Per-block flags (layers then head). Gradients of blocks that are not
        trainable are returned as ``None`` and, if they form a prefix, the
        backward pass stops early.

    Returns
    -------
    loss : float
    grads : list of dict
        Same structure as ``model.blocks()``.
    """
    Hb, _ = _as_batch(H)
    B = Hb.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    n_blocks = model.n_layers + 1
    trainable = [True] * n_blocks if trainable is None else list(trainable)
    if len(trainable) != n_blocks:
        raise ValueError(f"trainable mask needs {n_blocks} entries")

    W, (cache, E_last, V, norm) = _forward(model, Hb, P, keep_cache=True)

    # rates: R_k = ln(T_k + s2) - ln(I_k + s2), T_k = sum_l |G_kl|^2
    G = np.swapaxes(Hb, 1, 2) @ W
    G2 = np.abs(G) ** 2
    T = G2.sum(axis=2)
    S = np.diagonal(G2, axis1=1, axis2=2)
    I = T - S
    loss = -float(np.sum(np.log(T + sigma2) - np.log(I + sigma2))) / B

    # Wirtinger-style gradient: g = d/dRe + i d/dIm
    K = G.shape[1]
    off = 1.0 - np.eye(K)
    gG = (-2.0 / B) * (G / (T + sigma2)[:, :, None] - G * off / (I + sigma2)[:, :, None])
    gW = Hb.conj() @ gG
    Vhat = V / norm
    proj = np.sum((Vhat.conj() * gW).real, axis=(1, 2), keepdims=True)
    gV = (np.sqrt(P) / norm) * (gW - Vhat * proj)
    dout = np.stack([gV.real, gV.imag], axis=-1)

    grads = [None] * n_blocks
    h = E_last.shape[-1]
    if trainable[-1]:
        grads[-1] = {
            "W": E_last.reshape(-1, h).T @ dout.reshape(-1, 2),
            "b": dout.reshape(-1, 2).sum(axis=0),
        }
    if not any(trainable[:-1]):
        return loss, grads
    first = trainable.index(True)
    dE = dout @ model.head["W"].T
    slope = model.leaky_slope
    for i in range(model.n_layers - 1, first - 1, -1):
        layer = model.layers[i]
        E, A_ap, A_ue, Z = cache[i]
        dZ = dE * np.where(Z > 0, 1.0, slope)
        d_in = E.shape[-1]
        dZ2 = dZ.reshape(-1, dZ.shape[-1])
        if trainable[i]:
            grads[i] = {
                "W_self": E.reshape(-1, d_in).T @ dZ2,
                "W_ap_agg": A_ap.reshape(-1, d_in).T @ dZ2,
                "W_ue_agg": A_ue.reshape(-1, d_in).T @ dZ2,
                "b": dZ2.sum(axis=0),
            }
        if i > first:
            # the exclusive-mean operator is symmetric, so it is its own adjoint
            dE = (dZ @ layer["W_self"].T
                  + _exclusive_mean(dZ @ layer["W_ap_agg"].T, axis=2, exact=False)
                  + _exclusive_mean(dZ @ layer["W_ue_agg"].T, axis=1, exact=False))
    return loss, grads


def _flatten(model, trainable):
    return np.concatenate([
        v.ravel() for blk, t in zip(model.blocks(), trainable) if t for v in blk.values()
    ])


def _flatten_grads(grads, model, trainable):
    return np.concatenate([
        grads[i][k].ravel()
        for i, (blk, t) in enumerate(zip(model.blocks(), trainable)) if t
        for k in blk
    ])


def _assign(model, vec, trainable):
    pos = 0
    for blk, t in zip(model.blocks(), trainable):
        if not t:
            continue
        for k, v in blk.items():
            blk[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Hyperparameters for (pre)training and fine-tuning.

    ``freeze_mask`` has one flag per block (layers, then head); ``None``
    trains everything. ``n_train`` subsamples the training split.
    """

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    P: float = 1.0
    sigma2: float = 1.0
    n_train: int | None = None
    freeze_mask: list | None = None
    fit_input_scale: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.sigma2 > 0 or not self.P > 0:
            raise ValueError("learning_rate, sigma2 and P must be positive")


@dataclass
class TrainResult:
    model: GnnModel
    history: list = field(default_factory=list)
    best_epoch: int = 0


def mean_sum_rate(model: GnnModel, H, P: float, sigma2: float, chunk: int = 1024) -> float:
    """Average sum rate (bits/channel use) of the GNN precoder over a stack."""
    H = np.asarray(H)
    rates = [sum_rate(H[i:i + chunk], forward(model, H[i:i + chunk], P), sigma2)
             for i in range(0, len(H), chunk)]
    return float(np.mean(np.concatenate(rates)))


def train(model: GnnModel, dataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the train split; keeps the best-validation epoch.

    The returned history has one row per epoch with the mean training loss
    (negative sum rate, bits) and the validation sum rate.
    """
    train_H = dataset.subset(split="train").H
    val_H = dataset.subset(split="val").H
    if len(train_H) == 0 or len(val_H) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    rng = RngStream(cfg.seed)
    if cfg.n_train is not None:
        if cfg.n_train > len(train_H):
            raise ValueError(f"n_train={cfg.n_train} exceeds {len(train_H)} training samples")
        train_H = train_H[np.sort(rng.child("subsample").permutation(len(train_H))[:cfg.n_train])]

    model = model.copy()
    if cfg.fit_input_scale:
        model.input_scale = fit_input_scale(train_H)
    n_blocks = model.n_layers + 1
    mask = [False] * n_blocks if cfg.freeze_mask is None else [bool(f) for f in cfg.freeze_mask]
    if len(mask) != n_blocks:
        raise ValueError(f"freeze_mask needs {n_blocks} entries (layers + head)")
    trainable = [not f for f in mask]
    if not any(trainable):
        warnings.warn("all layers frozen; returning the model unchanged", stacklevel=2)
        return TrainResult(model, [], 0)

    params = _flatten(model, trainable)
    state = AdamState(params.size, learning_rate=cfg.learning_rate)
    shuffle = rng.child("shuffle")
    best, best_val, history = model.copy(), -np.inf, []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(train_H))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = train_H[order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grad(model, batch, cfg.P, cfg.sigma2, trainable)
            params = adam_step(state, params, _flatten_grads(grads, model, trainable))
            _assign(model, params, trainable)
            losses.append(loss * len(batch))
        train_loss = sum(losses) / len(train_H) / math.log(2)
        val = mean_sum_rate(model, val_H, cfg.P, cfg.sigma2)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_sumrate": val})
        log.debug("epoch %d loss %.4f val %.4f", epoch, train_loss, val)
        if val > best_val:
            best, best_val, best_epoch = model.copy(), val, epoch
    return TrainResult(best, history, best_epoch)


def default_freeze_mask(n_layers: int, n_tuned: int = 2) -> list:
    """Freeze all message-passing layers except the last ``n_tuned``; tune the head."""
    n_tuned = min(n_tuned, n_layers)
    return [True] * (n_layers - n_tuned) + [False] * n_tuned + [False]


def fine_tune(pretrained: GnnModel, dataset, cfg: TrainConfig) -> TrainResult:
    """Adapt ``pretrained`` to ``dataset`` while keeping frozen blocks fixed.

    The input scale is part of the pretrained model and is never refitted.
    """
    mask = cfg.freeze_mask or default_freeze_mask(pretrained.n_layers)
    cfg = TrainConfig(**{**cfg.__dict__, "freeze_mask": mask, "fit_input_scale": False})
    return train(pretrained, dataset, cfg)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def model_to_dict(model: GnnModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_layers": model.n_layers,
        "hidden_dim": model.hidden_dim,
        "leaky_slope": model.leaky_slope,
        "input_scale": model.input_scale,
        "layers": [{k: layer[k] for k in LAYER_KEYS} for layer in model.layers],
        "head": {k: model.head[k] for k in HEAD_KEYS},
    }


def save_model(model: GnnModel, path) -> None:
    Path(path).write_text(dumps17(model_to_dict(model)) + "\n", encoding="utf-8")


def _array(obj, shape, where):
    try:
        arr = np.array(obj, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{where}: not a numeric array") from None
    if arr.shape != shape:
        raise ModelFormatError(f"{where}: shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{where}: non-finite values")
    return arr


def model_from_dict(doc: dict) -> GnnModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        n_layers, hidden = int(doc["n_layers"]), int(doc["hidden_dim"])
        slope, scale = float(doc["leaky_slope"]), float(doc["input_scale"])
        raw_layers, raw_head = doc["layers"], doc["head"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"missing or invalid header field: {exc}") from None
    if not isinstance(raw_layers, list) or len(raw_layers) != n_layers:
        raise ModelFormatError(f"expected {n_layers} layers, found "
                               f"{len(raw_layers) if isinstance(raw_layers, list) else 'none'}")
    layers = []
    d_in = 2
    for i, raw in enumerate(raw_layers):
        if not isinstance(raw, dict):
            raise ModelFormatError(f"layer {i}: not an object")
        try:
            layers.append({
                "W_self": _array(raw["W_self"], (d_in, hidden), f"layer {i} W_self"),
                "W_ap_agg": _array(raw["W_ap_agg"], (d_in, hidden), f"layer {i} W_ap_agg"),
                "W_ue_agg": _array(raw["W_ue_agg"], (d_in, hidden), f"layer {i} W_ue_agg"),
                "b": _array(raw["b"], (hidden,), f"layer {i} b"),
            })
        except KeyError as exc:
            raise ModelFormatError(f"layer {i}: missing {exc}") from None
        d_in = hidden
    try:
        head = {"W": _array(raw_head["W"], (hidden, 2), "head W"),
                "b": _array(raw_head["b"], (2,), "head b")}
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"head: missing {exc}") from None
    return GnnModel(layers, head, slope, scale)


def load_model(path) -> GnnModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid or truncated JSON ({exc.msg})") from None
    try:
        return model_from_dict(doc)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
