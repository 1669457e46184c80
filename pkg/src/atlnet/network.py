"""Stacked sparse autoencoders with a softmax head, and the three-branch joint model.

A :class:`SsaeNetwork` is a chain of sigmoid encoders (decoders are dropped
after greedy pretraining) optionally topped by a softmax layer. A
:class:`JointModel` runs a spectral and a spatial network side by side,
concatenates their codes and feeds them to a fusion network that carries the
softmax head. Both expose the same duck-typed surface used by the active
learning and transfer code: ``logits``, ``predict_proba``, ``predict``,
``params`` and ``copy``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autoencoder import SaeHyper, TrainingDivergedError, minibatches, train_sae
from .numcore import ShapeError, child_rng, sigmoid

MODEL_MAGIC = b"SSAE1"


class ModelFormatError(ValueError):
    pass


@dataclass
class Encoder:
    w: np.ndarray  # (n_out, n_in)
    b: np.ndarray  # (n_out,)

    def copy(self) -> "Encoder":
        return Encoder(self.w.copy(), self.b.copy())


@dataclass
class SsaeNetwork:
    input_dim: int
    encoders: list[Encoder] = field(default_factory=list)
    softmax_w: np.ndarray | None = None  # (C, d_last)
    softmax_b: np.ndarray | None = None  # (C,)

    def __post_init__(self):
        d = self.input_dim
        for i, enc in enumerate(self.encoders):
            if enc.w.shape[1] != d or enc.b.shape != (enc.w.shape[0],):
                raise ShapeError(f"encoder {i} has shape {enc.w.shape}, expected input dim {d}")
            d = enc.w.shape[0]
        if self.softmax_w is not None:
            if self.softmax_w.shape[1] != d or self.softmax_b is None or self.softmax_b.shape != (self.softmax_w.shape[0],):
                raise ShapeError(f"softmax head {self.softmax_w.shape} does not fit feature dim {d}")

    @property
    def output_dim(self) -> int:
        return self.encoders[-1].w.shape[0] if self.encoders else self.input_dim

    @property
    def class_count(self) -> int:
        return 0 if self.softmax_w is None else self.softmax_w.shape[0]

    @property
    def has_head(self) -> bool:
        return self.softmax_w is not None

    def activations(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"input has {x.shape[-1]} features, network expects {self.input_dim}")
        acts = [x]
        for enc in self.encoders:
            acts.append(sigmoid(acts[-1] @ enc.w.T + enc.b))
        return acts

    def forward(self, x) -> np.ndarray:
        return self.activations(x)[-1]

    def logits(self, x) -> np.ndarray:
        if not self.has_head:
            raise ValueError("network has no softmax head")
        return self.forward(x) @ self.softmax_w.T + self.softmax_b

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def params(self) -> list[np.ndarray]:
        out = []
        for enc in self.encoders:
            out += [enc.w, enc.b]
        if self.has_head:
            out += [self.softmax_w, self.softmax_b]
        return out

    def copy(self) -> "SsaeNetwork":
        return SsaeNetwork(
            self.input_dim,
            [e.copy() for e in self.encoders],
            None if self.softmax_w is None else self.softmax_w.copy(),
            None if self.softmax_b is None else self.softmax_b.copy(),
        )

    def with_head(self, w: np.ndarray, b: np.ndarray) -> "SsaeNetwork":
        return SsaeNetwork(self.input_dim, [e.copy() for e in self.encoders], w.copy(), b.copy())


@dataclass
class JointModel:
    """Spectral and spatial branches feeding a fusion network with the softmax head.

    Inputs are rows of ``concat(spectral, spatial)``; the split point is the
    spectral branch input dimension.
    """

    spectral: SsaeNetwork
    spatial: SsaeNetwork
    fusion: SsaeNetwork

    def __post_init__(self):
        if self.fusion.input_dim != self.spectral.output_dim + self.spatial.output_dim:
            raise ShapeError(
                f"fusion input {self.fusion.input_dim} != {self.spectral.output_dim} + {self.spatial.output_dim}"
            )

    @property
    def spectral_dim(self) -> int:
        return self.spectral.input_dim

    @property
    def input_dim(self) -> int:
        return self.spectral.input_dim + self.spatial.input_dim

    @property
    def class_count(self) -> int:
        return self.fusion.class_count

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"input has {x.shape[-1]} features, joint model expects {self.input_dim}")
        return x[..., : self.spectral_dim], x[..., self.spectral_dim :]

    def stacked(self, x) -> np.ndarray:
        spe, spa = self.split(x)
        return np.concatenate([self.spectral.forward(spe), self.spatial.forward(spa)], axis=-1)

    def forward(self, x) -> np.ndarray:
        return self.fusion.forward(self.stacked(x))

    def logits(self, x) -> np.ndarray:
        return self.fusion.logits(self.stacked(x))

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def params(self) -> list[np.ndarray]:
        return self.spectral.params() + self.spatial.params() + self.fusion.params()

    def copy(self) -> "JointModel":
        return JointModel(self.spectral.copy(), self.spatial.copy(), self.fusion.copy())


@dataclass
class BranchConfig:
    spectral_hidden: list[int] = field(default_factory=lambda: [200, 150])
    spatial_hidden: list[int] = field(default_factory=lambda: [200, 150])
    fusion_hidden: list[int] = field(default_factory=lambda: [400, 200])
    spectral_sae: SaeHyper = field(default_factory=SaeHyper)
    spatial_sae: SaeHyper = field(default_factory=SaeHyper)
    fusion_sae: SaeHyper = field(default_factory=SaeHyper)

    def __post_init__(self):
        for name in ("spectral_hidden", "spatial_hidden", "fusion_hidden"):
            widths = getattr(self, name)
            if not widths or any(int(w) < 1 for w in widths):
                raise ValueError(f"{name} must be a non-empty list of positive widths")


@dataclass
class FinetuneConfig:
    """Supervised phase settings.

    ``epochs`` caps the initial whole-network fine-tuning, ``softmax_epochs``
    the head-only warm start, ``refine_epochs`` each later refinement round,
    which runs at ``refine_lr`` (default: ``lr``).
    ``update_encoders=False`` restricts every supervised update to the head.
    """

    epochs: int = 500
    softmax_epochs: int = 200
    refine_epochs: int = 100
    lr: float = 0.05
    lam: float = 7e-7
    batch_size: int = 128
    update_encoders: bool = True
    refine_lr: float | None = None

    def __post_init__(self):
        if min(self.epochs, self.softmax_epochs, self.refine_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr < 0 or (self.refine_lr is not None and self.refine_lr < 0):
            raise ValueError("learning rates must be non-negative")
        if self.lam < 0 or self.batch_size < 1:
            raise ValueError("lam must be >= 0 and batch_size >= 1")


@dataclass
class FinetuneResult:
    model: SsaeNetwork | JointModel
    loss_trace: list[float]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def refine(model, x, y, ft: FinetuneConfig, rng: np.random.Generator) -> "FinetuneResult":
    """One refinement round of an already trained model, as run after each query."""
    lr = ft.lr if ft.refine_lr is None else ft.refine_lr
    return finetune(model, x, y, ft.refine_epochs, lr, rng, lam=ft.lam, batch_size=ft.batch_size,
                    update_encoders=ft.update_encoders)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_predict(model, x) -> np.ndarray:
    """Class probabilities for one input vector (or a batch of rows)."""
    return model.predict_proba(x)


def greedy_pretrain(inputs, hidden_sizes, hyper: SaeHyper, rng: np.random.Generator) -> SsaeNetwork:
    """Greedy layer-wise pretraining; layer k learns to reconstruct the codes of layers 1..k-1."""
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be non-empty")
    x = np.asarray(inputs, dtype=np.float64)
    net = SsaeNetwork(x.shape[1])
    codes = x
    for width in hidden_sizes:
        layer = train_sae(codes, replace(hyper, hidden=int(width)), rng).layer
        net.encoders.append(Encoder(layer.w_enc, layer.b_enc))
        codes = sigmoid(codes @ layer.w_enc.T + layer.b_enc)
    return net


# -- supervised objective -------------------------------------------------


def _one_hot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((y.shape[0], c))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _backprop_encoders(net: SsaeNetwork, acts: list[np.ndarray], d_top: np.ndarray, lam: float):
    grads = []
    d = d_top
    for i in range(len(net.encoders) - 1, -1, -1):
        enc = net.encoders[i]
        h = acts[i + 1]
        d_pre = d * h * (1.0 - h)
        grads.append((d_pre.T @ acts[i] + lam * enc.w, d_pre.sum(axis=0)))
        d = d_pre @ enc.w
    grads.reverse()
    flat = []
    for gw, gb in grads:
        flat += [gw, gb]
    return flat, d


def _weight_decay(model, lam: float) -> float:
    total = 0.0
    for p in model.params():
        if p.ndim == 2:
            total += float(np.sum(p**2))
    return 0.5 * lam * total


def supervised_loss(model, x, y, lam: float) -> float:
    """Mean cross-entropy of the softmax head plus ``lam/2`` times the squared weights."""
    y = np.asarray(y, dtype=np.int64)
    z = model.logits(x)
    zmax = z.max(axis=1, keepdims=True)
    log_norm = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = float(np.mean(log_norm - z[np.arange(y.shape[0]), y]))
    return ce + _weight_decay(model, lam)


def supervised_grad(model, x, y, lam: float) -> list[np.ndarray]:
    """Gradient of :func:`supervised_loss`, aligned with ``model.params()``."""
    y = np.asarray(y, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if isinstance(model, JointModel):
        spe, spa = model.split(x)
        spe_acts = model.spectral.activations(spe)
        spa_acts = model.spatial.activations(spa)
        stacked = np.concatenate([spe_acts[-1], spa_acts[-1]], axis=1)
        fusion_grads, d_stacked = _head_and_encoder_grads(model.fusion, stacked, y, n, lam)
        k = model.spectral.output_dim
        spe_grads, _ = _backprop_encoders(model.spectral, spe_acts, d_stacked[:, :k], lam)
        spa_grads, _ = _backprop_encoders(model.spatial, spa_acts, d_stacked[:, k:], lam)
        return spe_grads + spa_grads + fusion_grads
    grads, _ = _head_and_encoder_grads(model, x, y, n, lam)
    return grads


def _head_and_encoder_grads(net: SsaeNetwork, x, y, n: int, lam: float):
    acts = net.activations(x)
    top = acts[-1]
    probs = softmax(top @ net.softmax_w.T + net.softmax_b)
    dz = (probs - _one_hot(y, net.class_count)) / n
    g_w = dz.T @ top + lam * net.softmax_w
    g_b = dz.sum(axis=0)
    enc_grads, d_in = _backprop_encoders(net, acts, dz @ net.softmax_w, lam)
    return enc_grads + [g_w, g_b], d_in


def finetune(model, x, y, epochs: int, lr: float, rng: np.random.Generator, lam: float = 7e-7,
             batch_size: int = 128, update_encoders: bool = True) -> FinetuneResult:
    """Minibatch SGD on the supervised objective, through the head and (by default) all encoders.

    Works on a copy; the input model is left untouched. ``loss_trace[0]`` is
    the objective before training, then one entry per epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("no labeled samples to fine-tune on")
    if y.min() < 0 or y.max() >= model.class_count:
        raise ValueError(f"labels must lie in [0, {model.class_count})")
    model = model.copy()
    params = model.params()
    first_trainable = 0 if update_encoders else len(params) - 2  # head is always last
    trace = [supervised_loss(model, x, y, lam)]
    if not np.isfinite(trace[0]):
        raise TrainingDivergedError(0, 0, trace[0])
    for epoch in range(1, epochs + 1):
        for b, idx in enumerate(minibatches(x.shape[0], batch_size, rng)):
            grads = supervised_grad(model, x[idx], y[idx], lam)
            for p, g in zip(params[first_trainable:], grads[first_trainable:]):
                p -= lr * g
        loss = supervised_loss(model, x, y, lam)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, b, loss)
        trace.append(loss)
    return FinetuneResult(model, trace)


def train_softmax_head(features, y, class_count: int, epochs: int, lr: float, rng: np.random.Generator,
                       lam: float = 7e-7, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Fit a softmax layer on fixed features, starting from zero weights."""
    f = np.asarray(features, dtype=np.float64)
    head = SsaeNetwork(f.shape[1], [], np.zeros((class_count, f.shape[1])), np.zeros(class_count))
    trained = finetune(head, f, y, epochs, lr, rng, lam=lam, batch_size=batch_size).model
    return trained.softmax_w, trained.softmax_b


def fit_network(x, y, class_count: int, hidden: list[int], hyper: SaeHyper, ft: FinetuneConfig,
                rng: np.random.Generator) -> FinetuneResult:
    """Single-branch recipe: greedy pretraining, softmax warm start, joint fine-tuning."""
    net = greedy_pretrain(x, hidden, hyper, rng)
    w, b = train_softmax_head(net.forward(x), y, class_count, ft.softmax_epochs, ft.lr, rng,
                              lam=ft.lam, batch_size=ft.batch_size)
    net = net.with_head(w, b)
    return finetune(net, x, y, ft.epochs, ft.lr, rng, lam=ft.lam, batch_size=ft.batch_size,
                    update_encoders=ft.update_encoders)


def fit_joint_model(x, y, class_count: int, spectral_dim: int, cfg: BranchConfig, ft: FinetuneConfig,
                    seed: int, pretrain_x=None) -> FinetuneResult:
    """Full joint recipe.

    Both branches are pretrained on ``pretrain_x`` (default: the labeled
    rows), the fusion network is pretrained on their stacked codes, the
    softmax head is warm-started on the fused code and finally every
    parameter is fine-tuned on the labeled rows.
    """
    x = np.asarray(x, dtype=np.float64)
    px = x if pretrain_x is None else np.asarray(pretrain_x, dtype=np.float64)
    spectral = greedy_pretrain(px[:, :spectral_dim], cfg.spectral_hidden, cfg.spectral_sae,
                               child_rng(seed, "pretrain/spectral"))
    spatial = greedy_pretrain(px[:, spectral_dim:], cfg.spatial_hidden, cfg.spatial_sae,
                              child_rng(seed, "pretrain/spatial"))
    stacked = np.concatenate([spectral.forward(px[:, :spectral_dim]), spatial.forward(px[:, spectral_dim:])], axis=1)
    fusion = greedy_pretrain(stacked, cfg.fusion_hidden, cfg.fusion_sae, child_rng(seed, "pretrain/fusion"))
    model = JointModel(spectral, spatial, fusion)
    rng = child_rng(seed, "finetune")
    w, b = train_softmax_head(model.forward(x), y, class_count, ft.softmax_epochs, ft.lr, rng,
                              lam=ft.lam, batch_size=ft.batch_size)
    model.fusion = model.fusion.with_head(w, b)
    return finetune(model, x, y, ft.epochs, ft.lr, rng, lam=ft.lam, batch_size=ft.batch_size,
                    update_encoders=ft.update_encoders)


def joint_forward(jm: JointModel, spectral_x, spatial_x) -> tuple[np.ndarray, np.ndarray]:
    """Fused feature and class probabilities for one pixel (or a batch)."""
    spectral_x = np.asarray(spectral_x, dtype=np.float64)
    spatial_x = np.asarray(spatial_x, dtype=np.float64)
    if spectral_x.shape[-1] != jm.spectral.input_dim or spatial_x.shape[-1] != jm.spatial.input_dim:
        raise ShapeError(
            f"got spectral {spectral_x.shape[-1]} / spatial {spatial_x.shape[-1]} features, "
            f"model expects {jm.spectral.input_dim} / {jm.spatial.input_dim}"
        )
    stacked = np.concatenate([jm.spectral.forward(spectral_x), jm.spatial.forward(spatial_x)], axis=-1)
    fused = jm.fusion.forward(stacked)
    probs = softmax(fused @ jm.fusion.softmax_w.T + jm.fusion.softmax_b)
    return fused, probs


# -- serialization -------------------------------------------------------
#
# File layout (all integers little-endian u32, all reals little-endian f64):
#   b"SSAE1", network_count (1 = single network, 3 = spectral/spatial/fusion)
#   per network: layer_count L, input_dim, L hidden widths, class_count C (0 = headless)
#   then, per network in the same order: for each layer w (row-major) then b;
#   then softmax_w (C x d_last, row-major) and softmax_b when C > 0.


def _network_header(net: SsaeNetwork) -> bytes:
    dims = [len(net.encoders), net.input_dim] + [e.w.shape[0] for e in net.encoders] + [net.class_count]
    return struct.pack(f"<{len(dims)}I", *dims)


def model_to_bytes(model) -> bytes:
    nets = [model.spectral, model.spatial, model.fusion] if isinstance(model, JointModel) else [model]
    out = [MODEL_MAGIC, struct.pack("<I", len(nets))]
    out += [_network_header(n) for n in nets]
    for net in nets:
        for p in net.params():
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def model_from_bytes(buf: bytes):
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise ModelFormatError(f"model file truncated at byte {pos} (need {nbytes} more bytes)")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise ModelFormatError("bad magic at byte 0: not an SSAE1 model file")
    count = u32()
    if count not in (1, 3):
        raise ModelFormatError(f"network count {count} at byte 5 must be 1 or 3")
    headers = []
    for _ in range(count):
        n_layers = u32()
        input_dim = u32()
        widths = [u32() for _ in range(n_layers)]
        headers.append((input_dim, widths, u32()))

    def block(shape) -> np.ndarray:
        size = int(np.prod(shape))
        return np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)

    nets = []
    for input_dim, widths, c in headers:
        encoders, d = [], input_dim
        for w in widths:
            encoders.append(Encoder(block((w, d)), block((w,))))
            d = w
        sw = block((c, d)) if c else None
        sb = block((c,)) if c else None
        nets.append(SsaeNetwork(input_dim, encoders, sw, sb))
    if pos != len(buf):
        raise ModelFormatError(f"{len(buf) - pos} trailing bytes after byte {pos}")
    return nets[0] if count == 1 else JointModel(*nets)


def save_model(path, model) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
