"""Single sparse autoencoder layer: forward pass, sparse loss, gradients, SGD training.

Batches are row-major: each row of a batch matrix is one input vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import ShapeError, sigmoid

DEFAULT_BATCH_SIZE = 128


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch: int, minibatch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, minibatch {minibatch}")
        self.epoch = epoch
        self.minibatch = minibatch
        self.loss = loss


@dataclass
class SaeHyper:
    hidden: int = 0  # 0 = set per layer by the caller
    rho: float = 0.1
    beta: float = 0.05
    lam: float = 7e-7
    lr: float = 0.05
    epochs: int = 500
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.hidden < 0:
            raise ValueError("hidden must be >= 0")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class SaeLayer:
    """Encoder ``w_enc (n x m), b_enc (n)`` and decoder ``w_dec (m x n), b_dec (m)``."""

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray

    def __post_init__(self):
        n, m = self.w_enc.shape
        if self.b_enc.shape != (n,) or self.w_dec.shape != (m, n) or self.b_dec.shape != (m,):
            raise ShapeError(
                f"inconsistent layer shapes: w_enc {self.w_enc.shape}, b_enc {self.b_enc.shape}, "
                f"w_dec {self.w_dec.shape}, b_dec {self.b_dec.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.w_enc.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w_enc.shape[0]

    def copy(self) -> "SaeLayer":
        return SaeLayer(self.w_enc.copy(), self.b_enc.copy(), self.w_dec.copy(), self.b_dec.copy())


@dataclass
class SaeGrads:
    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray


@dataclass
class SaeTrainResult:
    layer: SaeLayer
    loss_trace: list[float] = field(default_factory=list)


def init_layer(m: int, n: int, rng: np.random.Generator) -> SaeLayer:
    """Uniform weights in [-r, r] with r = sqrt(6 / (m + n + 1)); zero biases."""
    r = np.sqrt(6.0 / (m + n + 1))
    w_enc = rng.uniform(-r, r, size=(n, m))
    w_dec = rng.uniform(-r, r, size=(m, n))
    return SaeLayer(w_enc, np.zeros(n), w_dec, np.zeros(m))


def _check_batch(batch, m: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != m:
        raise ShapeError(f"batch has {x.shape[1]} features, layer expects {m}")
    return x


def encode(layer: SaeLayer, x) -> np.ndarray:
    """Hidden activations; accepts one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {layer.n_in}")
    return sigmoid(x @ layer.w_enc.T + layer.b_enc)


def decode(layer: SaeLayer, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != layer.n_hidden:
        raise ShapeError(f"code has {h.shape[-1]} units, layer expects {layer.n_hidden}")
    return sigmoid(h @ layer.w_dec.T + layer.b_dec)


def kl_divergence(rho: float, rho_hat) -> np.ndarray:
    rho_hat = np.asarray(rho_hat, dtype=np.float64)
    return rho * np.log(rho / rho_hat) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - rho_hat))


def sparse_loss(layer: SaeLayer, batch, hyper: SaeHyper) -> tuple[float, np.ndarray]:
    """Reconstruction error + weight decay + KL sparsity penalty.

    Returns ``(loss, rho_hat)`` where ``rho_hat`` is the mean hidden
    activation over the batch.
    """
    x = _check_batch(batch, layer.n_in)
    h = encode(layer, x)
    x_hat = decode(layer, h)
    rho_hat = h.mean(axis=0)
    recon = 0.5 * np.sum((x_hat - x) ** 2) / x.shape[0]
    decay = 0.5 * hyper.lam * (np.sum(layer.w_enc**2) + np.sum(layer.w_dec**2))
    sparsity = hyper.beta * float(np.sum(kl_divergence(hyper.rho, rho_hat)))
    return float(recon + decay + sparsity), rho_hat


def sparse_grad(layer: SaeLayer, batch, hyper: SaeHyper) -> SaeGrads:
    """Analytic gradient of :func:`sparse_loss` for all four parameter blocks.

    The mean activation is taken over the whole batch in a first forward
    pass and then fed into the hidden-layer delta.
    """
    x = _check_batch(batch, layer.n_in)
    count = x.shape[0]
    h = encode(layer, x)
    x_hat = decode(layer, h)
    rho_hat = h.mean(axis=0)

    d_out = (x_hat - x) * x_hat * (1.0 - x_hat) / count
    sparse_term = hyper.beta * (-hyper.rho / rho_hat + (1.0 - hyper.rho) / (1.0 - rho_hat)) / count
    d_hid = (d_out @ layer.w_dec + sparse_term) * h * (1.0 - h)

    return SaeGrads(
        w_enc=d_hid.T @ x + hyper.lam * layer.w_enc,
        b_enc=d_hid.sum(axis=0),
        w_dec=d_out.T @ h + hyper.lam * layer.w_dec,
        b_dec=d_out.sum(axis=0),
    )


def minibatches(n_rows: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Row index sets for one epoch.

    The whole set is one batch when it fits in ``batch_size``; otherwise the
    rows are shuffled and cut into ``ceil(n / batch_size)`` near-equal chunks,
    so no step runs on a stray handful of rows.
    """
    if n_rows <= batch_size:
        return [np.arange(n_rows)]
    order = rng.permutation(n_rows)
    return np.array_split(order, -(-n_rows // batch_size))


def train_sae(data, hyper: SaeHyper, rng: np.random.Generator) -> SaeTrainResult:
    """Train one sparse autoencoder with plain minibatch SGD.

    ``loss_trace[0]`` is the loss of the initial layer on all of ``data``;
    entry ``e`` is the loss after epoch ``e``.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D matrix")
    if hyper.hidden < 1:
        raise ValueError("hyper.hidden must be set to the layer width")
    layer = init_layer(x.shape[1], hyper.hidden, rng)
    trace = [sparse_loss(layer, x, hyper)[0]]
    if not np.isfinite(trace[0]):
        raise TrainingDivergedError(0, 0, trace[0])
    for epoch in range(1, hyper.epochs + 1):
        for b, idx in enumerate(minibatches(x.shape[0], hyper.batch_size, rng)):
            g = sparse_grad(layer, x[idx], hyper)
            layer.w_enc -= hyper.lr * g.w_enc
            layer.b_enc -= hyper.lr * g.b_enc
            layer.w_dec -= hyper.lr * g.w_dec
            layer.b_dec -= hyper.lr * g.b_dec
            if not (np.all(np.isfinite(layer.w_enc)) and np.all(np.isfinite(layer.w_dec))):
                raise TrainingDivergedError(epoch, b, float("nan"))
        loss = sparse_loss(layer, x, hyper)[0]
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, b, loss)
        trace.append(loss)
    return SaeTrainResult(layer, trace)


def with_hidden(hyper: SaeHyper, hidden: int) -> SaeHyper:
    return replace(hyper, hidden=hidden)
