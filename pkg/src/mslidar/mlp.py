"""Small feed-forward network trained with weighted cross-entropy.

Plain numpy, no autograd: the backward pass is written out so the
gradient can be checked against finite differences. Everything is
deterministic given the seed: Glorot-uniform init from a seeded
generator, seeded permutation shuffling, and fixed-order batch sums.

The two output units are initialized with identical weight rows. Class
gradients split them from the first step on, and the symmetry makes
label flipping an exact mirror: training on 1-y with swapped class
weights yields exactly swapped output units.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8192
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = None   # early stop on training loss; off by default
    dtype: type = np.float32


class Mlp:
    """d_in -> hidden... -> 2 with ReLU activations."""

    def __init__(self, d_in: int, hidden: tuple[int, ...] = (64, 64),
                 n_out: int = 2, seed: int = 0, dtype=np.float32):
        self.sizes = (int(d_in),) + tuple(int(h) for h in hidden) + (int(n_out),)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        last = len(self.sizes) - 2
        for li, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            if li == last:
                row = rng.uniform(-bound, bound, size=(fan_in, 1))
                w = np.repeat(row, fan_out, axis=1)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Logits plus the post-ReLU activations needed for backward."""
        acts = [x]
        h = x
        for i in range(len(self.weights) - 1):
            h = np.maximum(h @ self.weights[i] + self.biases[i], 0.0)
            acts.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return logits, acts

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.asarray(x, dtype=self.dtype))
        return softmax(logits.astype(np.float64))

    def loss_and_grads(self, x, y, class_weights):
        """Weighted cross-entropy and its gradients.

        loss = sum_i w_{y_i} * ce_i / sum_i w_{y_i}, so with unit class
        weights it reduces to the plain mean cross-entropy exactly.
        """
        x = np.asarray(x, dtype=self.dtype)
        y = np.asarray(y)
        cw = np.asarray(class_weights, dtype=self.dtype)
        logits, acts = self.forward(x)
        logits64 = logits.astype(np.float64)
        shift = logits64 - logits64.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shift).sum(axis=1)) + logits64.max(axis=1)
        ce = logsumexp - logits64[np.arange(y.shape[0]), y]
        w = cw[y].astype(np.float64)
        w_sum = w.sum()
        loss = float((w * ce).sum() / w_sum)

        p = softmax(logits64)
        onehot = np.zeros_like(p)
        onehot[np.arange(y.shape[0]), y] = 1.0
        dlogits = ((p - onehot) * (w / w_sum)[:, None]).astype(self.dtype)

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dlogits
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                if i == last and delta.shape[1] == 2:
                    # summed per class as rounded products, not via BLAS:
                    # its fused multiply-add makes the 2-term dot depend on
                    # class order and would break the label-flip mirror
                    w = self.weights[i]
                    back = delta[:, :1] * w[:, 0] + delta[:, 1:] * w[:, 1]
                else:
                    back = delta @ self.weights[i].T
                delta = back * (acts[i] > 0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend((gw, gb))
        return loss, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainResult:
    model: Mlp
    loss_curve: list[float] = field(default_factory=list)
    stopped_epoch: int | None = None


def train(
    features: np.ndarray,
    labels: np.ndarray,
    class_weights,
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train with AdamW (decoupled weight decay on the weight matrices).

    loss_curve[0] is the pre-training loss over the full set; entry e+1
    is the running weighted mean over epoch e's batches. Bit-identical
    results for identical inputs, seed, and dtype.
    """
    x = np.ascontiguousarray(features, dtype=config.dtype)
    y = np.ascontiguousarray(labels).astype(np.int64)
    if x.ndim != 2:
        raise DataError("features must be an (n, d) matrix")
    if y.shape[0] != x.shape[0]:
        raise DataError("labels and features disagree on point count")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("training labels must be binary 0/1")
    if np.unique(y).size < 2:
        raise DataError("training set must contain both classes")

    model = Mlp(x.shape[1], config.hidden, 2, seed=config.seed, dtype=config.dtype)
    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    lr = config.learning_rate
    b1, b2, eps = config.beta1, config.beta2, config.eps
    # decay applies to weight matrices only, not biases
    decayed = [i % 2 == 0 for i in range(len(params))]

    loss0, _ = model.loss_and_grads(x, y, class_weights)
    curve = [loss0]
    rng = np.random.default_rng(config.seed)
    t = 0
    best = loss0
    since_best = 0
    stopped = None
    n = x.shape[0]
    bs = max(int(config.batch_size), 1)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, n, bs):
            sel = order[start : start + bs]
            loss, grads = model.loss_and_grads(x[sel], y[sel], class_weights)
            if not np.isfinite(loss):
                raise NumericError(
                    f"loss became non-finite at epoch {epoch}, batch "
                    f"{start // bs}; the learning rate is likely too high "
                    f"(lr={lr}, last finite loss {curve[-1]:.6g})"
                )
            t += 1
            bc1 = 1.0 - b1**t
            bc2 = 1.0 - b2**t
            for i, (p, g) in enumerate(zip(params, grads)):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * np.square(g)
                update = (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)
                if decayed[i]:
                    p -= config.dtype(lr * config.weight_decay) * p
                p -= config.dtype(lr) * update
            epoch_loss += loss * sel.shape[0]
            epoch_weight += sel.shape[0]
        curve.append(epoch_loss / epoch_weight)
        if config.patience is not None:
            if curve[-1] < best - 1e-12:
                best = curve[-1]
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    stopped = epoch
                    break
    return TrainResult(model=model, loss_curve=curve, stopped_epoch=stopped)
