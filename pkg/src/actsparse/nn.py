"""MLP blocks, Top-k thresholding, a pre-LN encoder and hand-written backprop.

Conventions: batched arrays put the batch (and token) axes first and features
last. Weight matrices of the classifier MLP are stored ``(fan_in, fan_out)``;
the encoder's MLP keeps the ``(d_model, d_ff)`` shape for both ``K`` and ``V``
so that ``a = relu(K^T x)`` and ``out = V a``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .linalg import ShapeError, he_init, log_softmax, make_rng, softmax

LN_EPS = 1e-6
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Activation(str, enum.Enum):
    RELU = "relu"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    TANH = "tanh"


def activate(kind: Activation, p: np.ndarray) -> np.ndarray:
    kind = Activation(kind)
    if kind is Activation.RELU:
        # exact zeros for p <= 0; sparsity counting relies on it
        return np.where(p > 0, p, 0.0)
    if kind is Activation.GELU:
        return 0.5 * p * (1.0 + erf(p / _SQRT2))
    if kind is Activation.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * p))
    return np.tanh(p)


def activate_grad(kind: Activation, p: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation ``p``."""
    kind = Activation(kind)
    if kind is Activation.RELU:
        return (p > 0).astype(np.float64)
    if kind is Activation.GELU:
        return 0.5 * (1.0 + erf(p / _SQRT2)) + p * _INV_SQRT_2PI * np.exp(-0.5 * p * p)
    if kind is Activation.SIGMOID:
        s = 0.5 * (1.0 + np.tanh(0.5 * p))
        return s * (1.0 - s)
    return 1.0 - np.tanh(p) ** 2


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries along the last axis.

    Ties go to the lowest index (stable sort on the negated values).
    """
    a = np.asarray(a)
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    if k == n:
        return np.ones(a.shape, dtype=bool)
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_threshold(a: np.ndarray, k: int) -> np.ndarray:
    """Zero every entry except the ``k`` largest along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(topk_mask(a, k), a, 0.0)


# --------------------------------------------------------------------------
# single MLP block


@dataclass
class MlpLayer:
    """Two-layer MLP ``out = V topk(act(K^T x + b1)) + b2``.

    ``K`` and ``V`` are both ``(d_model, d_ff)``. Biases are optional; with
    both omitted the block is the bias-free form used in the theory checks.
    """

    K: np.ndarray
    V: np.ndarray
    activation: Activation = Activation.RELU
    topk: Optional[int] = None
    b1: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.K.ndim != 2 or self.K.shape != self.V.shape:
            raise ShapeError(f"K {self.K.shape} and V {self.V.shape} must share shape (d_model, d_ff)")
        if self.topk is not None and not 1 <= self.topk <= self.d_ff:
            raise ValueError(f"topk must lie in [1, {self.d_ff}], got {self.topk}")

    @property
    def d_model(self) -> int:
        return self.K.shape[0]

    @property
    def d_ff(self) -> int:
        return self.K.shape[1]

    @classmethod
    def init(cls, rng, d_model, d_ff, activation=Activation.RELU, topk=None, bias=True):
        K = he_init(rng, d_model, d_ff)
        V = he_init(rng, d_ff, d_model).T.copy()
        b1 = np.zeros(d_ff) if bias else None
        b2 = np.zeros(d_model) if bias else None
        return cls(K, V, activation, topk, b1, b2)


def _mlp_core(layer: MlpLayer, x: np.ndarray):
    pre = x @ layer.K
    if layer.b1 is not None:
        pre = pre + layer.b1
    a = activate(layer.activation, pre)
    mask = None
    if layer.topk is not None and layer.topk < layer.d_ff:
        mask = topk_mask(a, layer.topk)
        a = np.where(mask, a, 0.0)
    out = a @ layer.V.T
    if layer.b2 is not None:
        out = out + layer.b2
    return pre, mask, a, out


def mlp_forward(layer: MlpLayer, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(a, out)`` for one input (or a batch along leading axes)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_model:
        raise ShapeError(f"input dim {x.shape[-1]} does not match d_model {layer.d_model}")
    _, _, a, out = _mlp_core(layer, x)
    return a, out


def _mlp_backward(layer: MlpLayer, x, pre, mask, a, dout, da_extra=None):
    """Gradients of an MLP block. Top-k passes gradient only through kept units."""
    lead = x.shape[:-1]
    x2 = x.reshape(-1, layer.d_model)
    a2 = a.reshape(-1, layer.d_ff)
    dout2 = dout.reshape(-1, layer.d_model)
    grads = {"V": dout2.T @ a2}
    if layer.b2 is not None:
        grads["b2"] = dout2.sum(axis=0)
    da = dout2 @ layer.V
    if da_extra is not None:
        da = da + da_extra.reshape(-1, layer.d_ff)
    if mask is not None:
        da = np.where(mask.reshape(-1, layer.d_ff), da, 0.0)
    dpre = da * activate_grad(layer.activation, pre.reshape(-1, layer.d_ff))
    grads["K"] = x2.T @ dpre
    if layer.b1 is not None:
        grads["b1"] = dpre.sum(axis=0)
    dx = (dpre @ layer.K.T).reshape(*lead, layer.d_model)
    return dx, grads


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossKind:
    """Data loss plus an optional activation-map regularizer.

    ``kind`` is ``"mse"`` or ``"ce"``; ``reg`` is ``"none"``, ``"l1"`` or
    ``"l2"`` with weight ``lam``.
    """

    kind: str = "ce"
    reg: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mse", "ce"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.reg not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularizer {self.reg!r}")
        if self.lam < 0:
            raise ValueError("regularizer weight must be >= 0")


def _check_target(kind: str, f: np.ndarray, y: np.ndarray) -> None:
    if f.shape != y.shape:
        raise ShapeError(f"prediction shape {f.shape} does not match target shape {y.shape}")
    if kind == "ce" and not np.allclose(y.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("cross-entropy target is not a distribution (must sum to 1)")


def loss(kind: LossKind, f, y, activations: Sequence = ()) -> float:
    """Scalar loss of a single prediction ``f`` against target ``y``."""
    if isinstance(kind, str):
        kind = LossKind(kind)
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_target(kind.kind, f, y)
    if kind.kind == "mse":
        value = 0.5 * float(np.sum((f - y) ** 2))
    else:
        value = -float(np.dot(y, log_softmax(f)))
    if kind.reg != "none":
        for a in activations:
            a = np.asarray(a, dtype=np.float64)
            value += kind.lam * float(np.sum(np.abs(a)) if kind.reg == "l1" else np.sum(a * a))
    return value


def batch_loss(kind: LossKind, F: np.ndarray, Y: np.ndarray, acts=(), masks=None):
    """Mean loss over a batch and its gradients.

    Returns ``(loss, dF, dacts)`` where ``dacts`` matches ``acts``. ``masks``
    (one per activation array, or None) excludes padded tokens from the
    regularizer.
    """
    _check_target(kind.kind, F, Y)
    B = F.shape[0]
    if kind.kind == "mse":
        diff = F - Y
        value = 0.5 * np.sum(diff * diff) / B
        dF = diff / B
    else:
        ls = log_softmax(F)
        value = -np.sum(Y * ls) / B
        dF = (np.exp(ls) * Y.sum(axis=1, keepdims=True) - Y) / B
    dacts = []
    for i, a in enumerate(acts):
        m = None if masks is None else masks[i]
        if kind.reg == "none" or kind.lam == 0.0:
            dacts.append(None)
            continue
        if kind.reg == "l1":
            term, g = np.abs(a), np.sign(a)
        else:
            term, g = a * a, 2.0 * a
        if m is not None:
            term = term * m[..., None]
            g = g * m[..., None]
        value += kind.lam * term.sum() / B
        dacts.append(kind.lam * g / B)
    return float(value), dF, dacts


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# classifier MLP


class MLP:
    """Fully connected classifier with ReLU-family hidden layers.

    ``sizes = [d_in, h_1, ..., h_L, d_out]``. ``sizes=[784, w, 10]`` is the
    two-layer MLP of the width sweeps, where ``K = W0`` and ``V = W1.T``.
    """

    def __init__(self, sizes, activation=Activation.RELU, topk=None, bias=True, seed=0, rng=None):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = list(sizes)
        self.activation = Activation(activation)
        self.topk = topk
        self.bias = bias
        for h in self.sizes[1:-1]:
            if topk is not None and not 1 <= topk <= h:
                raise ValueError(f"topk={topk} out of range for hidden width {h}")
        rng = rng if rng is not None else make_rng(seed, 0)
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{i}"] = he_init(rng, fan_in, fan_out)
            if bias:
                self.params[f"b{i}"] = np.zeros(fan_out)
        self._cache = None

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def forward(self, X: np.ndarray, mask=None) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        inputs, pres, masks, acts = [], [], [], []
        for i in range(len(self.sizes) - 1):
            inputs.append(h)
            z = h @ self.params[f"W{i}"]
            if self.bias:
                z = z + self.params[f"b{i}"]
            if i == len(self.sizes) - 2:
                h = z
                break
            a = activate(self.activation, z)
            m = None
            if self.topk is not None and self.topk < z.shape[-1]:
                m = topk_mask(a, self.topk)
                a = np.where(m, a, 0.0)
            pres.append(z)
            masks.append(m)
            acts.append(a)
            h = a
        self._cache = (inputs, pres, masks, acts)
        return h

    @property
    def hidden(self) -> list[np.ndarray]:
        """Activation maps of the last forward pass, one array per hidden layer."""
        self._require_cache()
        return self._cache[3]

    @property
    def preacts(self) -> list[np.ndarray]:
        self._require_cache()
        return self._cache[1]

    def hidden_masks(self):
        return [None] * self.n_hidden

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")

    def backward(self, dout: np.ndarray, dacts=None) -> dict[str, np.ndarray]:
        self._require_cache()
        inputs, pres, masks, _ = self._cache
        grads = {}
        d = dout
        for i in reversed(range(len(self.sizes) - 1)):
            if i < len(self.sizes) - 2:
                if dacts is not None and dacts[i] is not None:
                    d = d + dacts[i]
                if masks[i] is not None:
                    d = np.where(masks[i], d, 0.0)
                d = d * activate_grad(self.activation, pres[i])
            grads[f"W{i}"] = inputs[i].T @ d
            if self.bias:
                grads[f"b{i}"] = d.sum(axis=0)
            if i > 0:
                d = d @ self.params[f"W{i}"].T
        return grads

    def mlp_layer(self, i: int = 0) -> MlpLayer:
        """View hidden layer ``i`` and its outgoing weights as an :class:`MlpLayer`."""
        K = self.params[f"W{i}"]
        V = self.params[f"W{i + 1}"].T
        if K.shape[0] != V.shape[0]:
            raise ShapeError("only blocks whose output dim equals their input dim form an MlpLayer")
        return MlpLayer(K, V, self.activation, self.topk, self.params.get(f"b{i}"), self.params.get(f"b{i + 1}"))


# --------------------------------------------------------------------------
# encoder


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


@dataclass
class EncoderBlock:
    """Single-head pre-LN encoder block.

    ``x -> x + attn(LN1(x)) -> h + mlp(LN2(h))``. No positional encoding:
    the block is permutation-equivariant over tokens.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    mlp: MlpLayer

    @classmethod
    def init(cls, rng, d_model, d_ff, activation=Activation.RELU, topk=None):
        # attention projections use fan-in scaling without the ReLU gain
        std = 1.0 / np.sqrt(d_model)
        wq, wk, wv, wo = (rng.standard_normal((d_model, d_model)) * std for _ in range(4))
        return cls(
            wq, wk, wv, wo,
            np.ones(d_model), np.zeros(d_model), np.ones(d_model), np.zeros(d_model),
            MlpLayer.init(rng, d_model, d_ff, activation, topk),
        )

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{n}": getattr(self, n) for n in ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b")}
        out[f"{prefix}K"] = self.mlp.K
        out[f"{prefix}V"] = self.mlp.V
        if self.mlp.b1 is not None:
            out[f"{prefix}b1"] = self.mlp.b1
        if self.mlp.b2 is not None:
            out[f"{prefix}b2"] = self.mlp.b2
        return out

    def forward(self, X: np.ndarray, mask: np.ndarray):
        """Batched forward; ``X`` is ``(B, N, d_model)``, ``mask`` is ``(B, N)``."""
        d = X.shape[-1]
        u, ln1 = _ln_forward(X, self.ln1_g, self.ln1_b)
        q, k, v = u @ self.wq, u @ self.wk, u @ self.wv
        scale = 1.0 / np.sqrt(d)
        S = np.einsum("bid,bjd->bij", q, k) * scale
        S = np.where(mask[:, None, :], S, -np.inf)
        P = softmax(S, axis=-1)
        o = P @ v
        h = X + o @ self.wo
        z, ln2 = _ln_forward(h, self.ln2_g, self.ln2_b)
        pre, tmask, a, m = _mlp_core(self.mlp, z)
        cache = (X, u, ln1, q, k, v, P, o, h, z, ln2, pre, tmask, a)
        return h + m, a, cache

    def backward(self, dY, cache, da_extra=None):
        X, u, ln1, q, k, v, P, o, h, z, ln2, pre, tmask, a = cache
        d = X.shape[-1]
        scale = 1.0 / np.sqrt(d)
        dz, g = _mlp_backward(self.mlp, z, pre, tmask, a, dY, da_extra)
        dh_ln, g["ln2_g"], g["ln2_b"] = _ln_backward(dz, self.ln2_g, ln2)
        dh = dY + dh_ln
        flat = lambda t: t.reshape(-1, d)  # noqa: E731
        g["wo"] = flat(o).T @ flat(dh)
        do = dh @ self.wo.T
        dP = do @ np.swapaxes(v, 1, 2)
        dv = np.swapaxes(P, 1, 2) @ do
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
        dq = dS @ k
        dk = np.swapaxes(dS, 1, 2) @ q
        g["wq"] = flat(u).T @ flat(dq)
        g["wk"] = flat(u).T @ flat(dk)
        g["wv"] = flat(u).T @ flat(dv)
        du = dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T
        dx_ln, g["ln1_g"], g["ln1_b"] = _ln_backward(du, self.ln1_g, ln1)
        return dh + dx_ln, g


def encoder_block_forward(block: EncoderBlock, X) -> tuple[np.ndarray, np.ndarray]:
    """Run one block on a single token sequence ``(N, d_model)``.

    Returns the output sequence and the per-token MLP activation maps.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("encoder block needs a non-empty (N, d_model) sequence")
    if X.shape[1] != block.mlp.d_model:
        raise ShapeError(f"token dim {X.shape[1]} does not match d_model {block.mlp.d_model}")
    Y, a, _ = block.forward(X[None], np.ones((1, X.shape[0]), dtype=bool))
    return Y[0], a[0]


class Encoder:
    """Token-feature embedding, a stack of encoder blocks, masked mean pool, linear head."""

    def __init__(self, d_in, d_model, d_ff, n_blocks, num_classes,
                 activation=Activation.RELU, topk=None, seed=0, rng=None):
        rng = rng if rng is not None else make_rng(seed, 0)
        self.d_model = d_model
        self.d_ff = d_ff
        self.topk = topk
        self.embed = rng.standard_normal((d_in, d_model)) / np.sqrt(d_in)
        self.blocks = [EncoderBlock.init(rng, d_model, d_ff, activation, topk) for _ in range(n_blocks)]
        self.lnf_g = np.ones(d_model)
        self.lnf_b = np.zeros(d_model)
        self.head = rng.standard_normal((d_model, num_classes)) / np.sqrt(d_model)
        self.head_b = np.zeros(num_classes)
        self.params = {"embed": self.embed, "lnf_g": self.lnf_g, "lnf_b": self.lnf_b,
                       "head": self.head, "head_b": self.head_b}
        for i, blk in enumerate(self.blocks):
            self.params.update(blk.named_params(f"block{i}."))
        self._cache = None

    @property
    def n_hidden(self) -> int:
        return len(self.blocks)

    def forward(self, X: np.ndarray, mask=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if mask is None:
            mask = np.ones(X.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        h = X @ self.embed
        caches, acts = [], []
        for blk in self.blocks:
            h, a, c = blk.forward(h, mask)
            caches.append(c)
            acts.append(a)
        w = mask / mask.sum(axis=1, keepdims=True)
        pooled = np.einsum("bn,bnd->bd", w, h)
        zf, lnf = _ln_forward(pooled, self.lnf_g, self.lnf_b)
        logits = zf @ self.head + self.head_b
        self._cache = (X, mask, w, caches, acts, zf, lnf)
        return logits

    @property
    def hidden(self) -> list[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        return self._cache[4]

    @property
    def preacts(self) -> list[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        return [c[11] for c in self._cache[3]]

    def hidden_masks(self):
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        return [self._cache[1]] * len(self.blocks)

    def backward(self, dout: np.ndarray, dacts=None) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        X, mask, w, caches, acts, zf, lnf = self._cache
        grads = {"head": zf.T @ dout, "head_b": dout.sum(axis=0)}
        dz = dout @ self.head.T
        dpooled, grads["lnf_g"], grads["lnf_b"] = _ln_backward(dz, self.lnf_g, lnf)
        dh = w[:, :, None] * dpooled[:, None, :]
        for i in reversed(range(len(self.blocks))):
            extra = None if dacts is None else dacts[i]
            dh, g = self.blocks[i].backward(dh, caches[i], extra)
            for name, val in g.items():
                grads[f"block{i}.{name}"] = val
        grads["embed"] = X.reshape(-1, X.shape[-1]).T @ dh.reshape(-1, self.d_model)
        return grads


def loss_and_grads(model, X, Y, kind: LossKind, mask=None):
    """Forward, loss and reverse pass for a batch.

    ``Y`` is either integer labels or a dense target matrix. Returns
    ``(loss, logits, grads)``.
    """
    logits = model.forward(X, mask)
    Y = np.asarray(Y)
    T = one_hot(Y, logits.shape[1]) if Y.ndim == 1 else Y.astype(np.float64)
    acts = model.hidden
    value, dF, dacts = batch_loss(kind, logits, T, acts, model.hidden_masks())
    grads = model.backward(dF, dacts)
    return value, logits, grads
