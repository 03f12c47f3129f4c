"""Forecasting networks that sit behind a normalization layer.

Layer definitions used here:

* bilinear: ``Y = act(W1 @ X @ W2 + bias)``
* TABL: ``Xb = W1 @ X``, ``alpha = softmax_rows(Xb @ W)``,
  ``Xt = lam * (Xb * alpha) + (1 - lam) * Xb``, ``Y = act(Xt @ W2 + bias)``.
  The attention matrix ``W`` keeps its diagonal fixed at ``1/H``.

The temporal attention layer follows the usual TABL design in spirit; the
equations above are the binding definition for this package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np

from .layers import (
    BinParams,
    BnInputParams,
    DainParams,
    LayerGrads,
    bin_backward,
    bin_forward,
    bn_commit,
    bn_input_backward,
    bn_input_forward,
    dain_backward,
    dain_forward,
)
from .series import StaticNormalizer, ValidationError, apply_static, as_batch, guarded

Activation = Literal["relu", "identity"]
NORMALIZERS = ("bin", "dain", "bn", "zscore", "minmax", "none")
HEADS = ("softmax3", "softmax2_plus_regression")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _act_backward(dy, z, activation):
    return dy * (z > 0) if activation == "relu" else dy


# ---------------------------------------------------------------------------
# Bilinear and TABL layers
# ---------------------------------------------------------------------------


@dataclass
class BilinearLayerParams:
    W1: np.ndarray  # (D', D)
    W2: np.ndarray  # (H, H')
    bias: np.ndarray  # (D', H')
    activation: Activation = "relu"

    def tensors(self) -> dict:
        return {"W1": self.W1, "W2": self.W2, "bias": self.bias}


@dataclass
class TablLayerParams:
    W1: np.ndarray  # (D', D)
    W: np.ndarray  # (H, H) attention mixing, diagonal fixed at 1/H
    lam: np.ndarray  # 0-d, in [0, 1]
    W2: np.ndarray  # (H, H')
    bias: np.ndarray  # (D', H')
    activation: Activation = "relu"

    def tensors(self) -> dict:
        return {"W1": self.W1, "W": self.W, "lam": self.lam, "W2": self.W2, "bias": self.bias}


@dataclass
class LayerCache:
    X: np.ndarray
    Z: np.ndarray  # pre-activation
    XW2: Optional[np.ndarray] = None  # bilinear: X @ W2
    Xbar: Optional[np.ndarray] = None  # tabl: W1 @ X
    alpha: Optional[np.ndarray] = None
    Xt: Optional[np.ndarray] = None
    single: bool = False


def _check_in(X, W1, W2):
    if X.shape[1] != W1.shape[1] or X.shape[2] != W2.shape[0]:
        raise ValidationError(f"input {X.shape[1:]} does not chain with W1 {W1.shape} / W2 {W2.shape}")


def bilinear_forward(X, p: BilinearLayerParams):
    single = np.ndim(X) == 2
    X = np.asarray(X, dtype=np.float64)
    X = X[None] if single else X
    _check_in(X, p.W1, p.W2)
    XW2 = X @ p.W2
    Z = p.W1 @ XW2 + p.bias
    Y = _act(Z, p.activation)
    return (Y[0] if single else Y), LayerCache(X, Z, XW2=XW2, single=single)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def tabl_forward(X, p: TablLayerParams):
    single = np.ndim(X) == 2
    X = np.asarray(X, dtype=np.float64)
    X = X[None] if single else X
    _check_in(X, p.W1, p.W2)
    Xbar = p.W1 @ X
    alpha = softmax(Xbar @ p.W, axis=-1)
    Xt = p.lam * (Xbar * alpha) + (1.0 - p.lam) * Xbar
    Z = Xt @ p.W2 + p.bias
    Y = _act(Z, p.activation)
    return (Y[0] if single else Y), LayerCache(X, Z, Xbar=Xbar, alpha=alpha, Xt=Xt, single=single)


def backbone_backward(cache: LayerCache, p, dY) -> LayerGrads:
    """Reverse-mode for a bilinear or TABL layer; gradients are summed over the batch."""
    dY = np.asarray(dY, dtype=np.float64)
    dY = dY[None] if dY.ndim == 2 else dY
    if dY.shape != cache.Z.shape:
        raise ValidationError(f"upstream gradient {dY.shape} does not match layer output {cache.Z.shape}")
    dZ = _act_backward(dY, cache.Z, p.activation)
    dbias = dZ.sum(axis=0)
    if isinstance(p, BilinearLayerParams):
        dW1 = np.einsum("nij,nkj->ik", dZ, cache.XW2)
        dW1X = p.W1.T @ dZ  # (N, D, H')
        dW2 = np.einsum("nij,nik->jk", cache.X, dW1X)
        dX = dW1X @ p.W2.T
        grads = BilinearLayerParams(dW1, dW2, dbias, p.activation)
    else:
        dW2 = np.einsum("nij,nik->jk", cache.Xt, dZ)
        dXt = dZ @ p.W2.T
        Xbar, alpha = cache.Xbar, cache.alpha
        dlam = np.array((dXt * (Xbar * alpha - Xbar)).sum())
        dXbar = dXt * (p.lam * alpha + (1.0 - p.lam))
        dalpha = p.lam * dXt * Xbar
        dE = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
        dW = np.einsum("nij,nik->jk", Xbar, dE)
        np.fill_diagonal(dW, 0.0)
        dXbar = dXbar + dE @ p.W.T
        dW1 = np.einsum("nij,nkj->ik", dXbar, cache.X)
        dX = p.W1.T @ dXbar
        grads = TablLayerParams(dW1, dW, dlam, dW2, dbias, p.activation)
    return LayerGrads(dX[0] if cache.single else dX, grads)


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: Literal["bilinear", "tabl"]
    out: tuple  # (D', H')
    activation: Activation = "relu"


@dataclass(frozen=True)
class ModelSpec:
    normalizer: str
    layers: tuple
    head: str = "softmax3"
    input_shape: tuple = (40, 10)

    def __post_init__(self):
        if self.normalizer not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {self.normalizer!r}; expected one of {NORMALIZERS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        layers = tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(l["kind"], tuple(l["out"]), l.get("activation", "relu"))
            for l in self.layers
        )
        for l in layers:
            if l.kind not in ("bilinear", "tabl") or len(l.out) != 2 or min(l.out) < 1:
                raise ValueError(f"bad layer spec {l}")
        object.__setattr__(self, "layers", tuple(LayerSpec(l.kind, tuple(int(v) for v in l.out), l.activation) for l in layers))

    @property
    def n_classes(self) -> int:
        return 3 if self.head == "softmax3" else 2

    def shapes(self):
        """Input shape of every backbone layer followed by the trunk output shape."""
        shapes = [self.input_shape]
        for l in self.layers:
            shapes.append(l.out)
        return shapes

    def to_dict(self) -> dict:
        return {
            "normalizer": self.normalizer,
            "layers": [{"kind": l.kind, "out": list(l.out), "activation": l.activation} for l in self.layers],
            "head": self.head,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(d["normalizer"], tuple(d["layers"]), d.get("head", "softmax3"), tuple(d.get("input_shape", (40, 10))))


def c_shape(normalizer="bin", head="softmax3", input_shape=(40, 10)) -> ModelSpec:
    """Two hidden layers: bilinear 60x10 then TABL 120x5, dense head."""
    return ModelSpec(normalizer, (LayerSpec("bilinear", (60, 10)), LayerSpec("tabl", (120, 5))), head, input_shape)


def b_shape(normalizer="bin", head="softmax3", input_shape=(40, 10)) -> ModelSpec:
    """One hidden layer: TABL 120x5, dense head."""
    return ModelSpec(normalizer, (LayerSpec("tabl", (120, 5)),), head, input_shape)


@dataclass
class HeadParams:
    W: np.ndarray  # (K, F) class logits
    b: np.ndarray  # (K,)
    Wr: Optional[np.ndarray] = None  # (F,) horizon regression
    br: Optional[np.ndarray] = None  # 0-d

    def tensors(self) -> dict:
        t = {"W": self.W, "b": self.b}
        if self.Wr is not None:
            t.update(Wr=self.Wr, br=self.br)
        return t


Normalizer = Union[BinParams, DainParams, BnInputParams, StaticNormalizer, None]


@dataclass
class ModelParams:
    norm: Normalizer
    layers: list
    head: HeadParams

    def tensors(self, trainable_only: bool = True) -> dict:
        """Flat ``name -> array`` view sharing memory with the parameters."""
        out = {}
        if isinstance(self.norm, (BinParams, DainParams, BnInputParams)):
            for k, v in self.norm.tensors().items():
                out[f"norm.{k}"] = v
            if not trainable_only and isinstance(self.norm, BnInputParams):
                out["norm.running_mean"] = self.norm.running_mean
                out["norm.running_var"] = self.norm.running_var
        if not trainable_only and isinstance(self.norm, StaticNormalizer) and self.norm.loc is not None:
            out["norm.loc"] = self.norm.loc
            out["norm.spread"] = self.norm.spread
        for i, layer in enumerate(self.layers):
            for k, v in layer.tensors().items():
                out[f"layer{i}.{k}"] = v
        for k, v in self.head.tensors().items():
            out[f"head.{k}"] = v
        return out


def init_params(spec: ModelSpec, seed: int = 0, static: Optional[StaticNormalizer] = None) -> ModelParams:
    rng = np.random.default_rng(seed)
    D, H = spec.input_shape
    if spec.normalizer == "bin":
        norm = BinParams.init(D, H)
    elif spec.normalizer == "dain":
        norm = DainParams.init(D)
    elif spec.normalizer == "bn":
        norm = BnInputParams.init(D, H)
    elif spec.normalizer == "none":
        norm = StaticNormalizer("none", fitted=True)
    else:
        norm = static if static is not None else StaticNormalizer(spec.normalizer)
    layers = []
    d, h = D, H
    for l in spec.layers:
        d2, h2 = l.out
        W1 = glorot(rng, (d2, d), d, d2)
        W2 = glorot(rng, (h, h2), h, h2)
        bias = np.zeros((d2, h2))
        if l.kind == "bilinear":
            layers.append(BilinearLayerParams(W1, W2, bias, l.activation))
        else:
            W = glorot(rng, (h, h), h, h)
            np.fill_diagonal(W, 1.0 / h)
            layers.append(TablLayerParams(W1, W, np.array(0.5), W2, bias, l.activation))
        d, h = d2, h2
    F = d * h
    K = spec.n_classes
    head = HeadParams(glorot(rng, (K, F), F, K), np.zeros(K))
    if spec.head == "softmax2_plus_regression":
        head.Wr = glorot(rng, (F,), F, 1)
        head.br = np.array(0.0)
    return ModelParams(norm, layers, head)


def count_parameters(spec: ModelSpec) -> dict:
    """Trainable parameter counts split into normalizer / backbone / head."""
    p = init_params(spec)
    counts = {"normalizer": 0, "backbone": 0, "head": 0}
    for name, arr in p.tensors().items():
        n = arr.size
        if name.endswith(".W") and name.startswith("layer"):
            n -= arr.shape[0]  # fixed diagonal
        key = "normalizer" if name.startswith("norm.") else "head" if name.startswith("head.") else "backbone"
        counts[key] += n
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ModelOutput:
    logits: np.ndarray  # (N, K)
    probs: np.ndarray  # (N, K)
    horizon: Optional[np.ndarray] = None  # (N,) non-negative
    caches: dict = field(default_factory=dict)


def _normalize(params: ModelParams, X, train: bool):
    norm = params.norm
    if isinstance(norm, BinParams):
        return bin_forward(X, norm)
    if isinstance(norm, DainParams):
        return dain_forward(X, norm)
    if isinstance(norm, BnInputParams):
        return bn_input_forward(X, norm, mode="train" if train else "eval")
    if isinstance(norm, StaticNormalizer):
        if not norm.fitted:
            raise ValueError("static normalizer has not been fitted")
        return apply_static(norm, X), None
    if norm is None:
        return X, None
    raise TypeError(f"unsupported normalizer {type(norm).__name__}")


def model_forward(spec: ModelSpec, params: ModelParams, X, train: bool = False) -> ModelOutput:
    """Run normalizer, backbone and head over a batch.

    ``train`` only matters for batch normalization (batch vs running statistics).
    """
    X = as_batch(X)
    if X.shape[1:] != spec.input_shape:
        raise ValidationError(f"input is {X.shape[1:]}, model expects {spec.input_shape}")
    h, norm_cache = _normalize(params, X, train)
    layer_caches = []
    for layer in params.layers:
        fwd = bilinear_forward if isinstance(layer, BilinearLayerParams) else tabl_forward
        h, c = fwd(h, layer)
        layer_caches.append(c)
    feats = h.reshape(h.shape[0], -1)
    logits = feats @ params.head.W.T + params.head.b
    out = ModelOutput(logits, softmax(logits), caches={"norm": norm_cache, "layers": layer_caches, "feats": feats})
    if params.head.Wr is not None:
        pre = feats @ params.head.Wr + params.head.br
        out.horizon = softplus(pre)
        out.caches["reg_pre"] = pre
    return out


def model_backward(spec: ModelSpec, params: ModelParams, out: ModelOutput, dlogits, dhorizon=None):
    """Backpropagate head gradients through the whole model.

    Returns ``(grads, dX)`` where ``grads`` maps the names of
    :meth:`ModelParams.tensors` to gradient arrays.
    """
    caches = out.caches
    feats = caches["feats"]
    grads = {"head.W": dlogits.T @ feats, "head.b": dlogits.sum(axis=0)}
    dfeats = dlogits @ params.head.W
    if params.head.Wr is not None:
        dpre = np.zeros(feats.shape[0]) if dhorizon is None else dhorizon * (0.5 * (1.0 + np.tanh(0.5 * caches["reg_pre"])))
        grads["head.Wr"] = dpre @ feats
        grads["head.br"] = np.array(dpre.sum())
        dfeats = dfeats + dpre[:, None] * params.head.Wr
    last = caches["layers"][-1].Z.shape if caches["layers"] else (feats.shape[0],) + spec.input_shape
    dh = dfeats.reshape(last)
    for i in reversed(range(len(params.layers))):
        g = backbone_backward(caches["layers"][i], params.layers[i], dh)
        for k, v in g.params.tensors().items():
            grads[f"layer{i}.{k}"] = v
        dh = g.dX
    norm = params.norm
    if isinstance(norm, (BinParams, DainParams, BnInputParams)):
        back = {BinParams: bin_backward, DainParams: dain_backward, BnInputParams: bn_input_backward}[type(norm)]
        g = back(caches["norm"], norm, dh)
        for k, v in g.params.tensors().items():
            grads[f"norm.{k}"] = v
        dh = g.dX
    elif isinstance(norm, StaticNormalizer) and norm.kind != "none":
        dh = dh / guarded(norm.spread)[:, None]
    return grads, dh


def commit_forward_state(params: ModelParams, out: ModelOutput) -> None:
    """Write running statistics produced by a train-mode forward back into the model."""
    if isinstance(params.norm, BnInputParams) and out.caches["norm"] is not None and out.caches["norm"].mode == "train":
        params.norm = bn_commit(params.norm, out.caches["norm"])


def predict(spec: ModelSpec, params: ModelParams, X, batch_size: int = 1024) -> ModelOutput:
    """Eval-mode forward in chunks; caches are dropped."""
    X = as_batch(X)
    logits, probs, hz = [], [], []
    for i in range(0, X.shape[0], batch_size):
        o = model_forward(spec, params, X[i : i + batch_size], train=False)
        logits.append(o.logits)
        probs.append(o.probs)
        if o.horizon is not None:
            hz.append(o.horizon)
    return ModelOutput(np.concatenate(logits), np.concatenate(probs), np.concatenate(hz) if hz else None)

