"""Central finite-difference checks for every analytic backward pass.

Each component is checked on seeded random instances with the scalar
objective ``sum(upstream * output)`` (layers) or the training loss (heads,
losses, end-to-end). The error metric per tensor is
``||analytic - numeric|| / (||analytic|| + ||numeric||)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .backbone import (
    BilinearLayerParams,
    LayerSpec,
    ModelSpec,
    TablLayerParams,
    backbone_backward,
    bilinear_forward,
    init_params,
    model_forward,
    softmax,
    tabl_forward,
)
from .layers import (
    BinParams,
    BnInputParams,
    DainParams,
    bin_backward,
    bin_forward,
    bn_input_backward,
    bn_input_forward,
    dain_backward,
    dain_forward,
)
from .series import fit_static
from .training import TrainConfig, batch_loss, loss_setting1, loss_setting2

STEP = 1e-5
LAYER_TOL = 1e-5
E2E_TOL = 1e-4
_FLOOR = 1e-12
RELU_MARGIN = 1e-3


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < _FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (perturbed in place, then restored)."""
    g = np.zeros(arr.shape)
    flat = arr.reshape(-1) if arr.ndim else arr[None]
    gflat = g.reshape(-1) if g.ndim else g[None]
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckRow:
    component: str
    tensor: str
    worst: float
    instances: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _collect(rows: dict, component: str, errors: dict, tol: float):
    for name, err in errors.items():
        key = (component, name)
        prev = rows.get(key)
        if prev is None:
            rows[key] = CheckRow(component, name, err, 1, tol)
        else:
            prev.worst = max(prev.worst, err)
            prev.instances += 1


def _check(f, tensors: dict, analytic: dict, corrupt: bool) -> dict:
    errs = {}
    for name, arr in tensors.items():
        a = analytic[name] * (1.001 if corrupt else 1.0)
        errs[name] = rel_error(a, numeric_grad(f, arr))
    return errs


# ---------------------------------------------------------------------------
# Instance generators
# ---------------------------------------------------------------------------


def bin_instance(rng, D=4, H=6):
    p = BinParams(
        gamma2=rng.uniform(0.5, 1.5, D),
        beta2=rng.normal(size=D),
        gamma1=rng.uniform(0.5, 1.5, H),
        beta1=rng.normal(size=H),
        lam_a=np.array(rng.uniform(0.1, 1.0)),
        lam_b=np.array(rng.uniform(0.1, 1.0)),
    )
    return rng.normal(size=(D, H)), p, rng.normal(size=(D, H))


def dain_instance(rng, D=4, H=6):
    p = DainParams(
        Wa=np.eye(D) + 0.3 * rng.normal(size=(D, D)),
        Wb=np.eye(D) + 0.1 * rng.normal(size=(D, D)),
        Wc=0.5 * rng.normal(size=(D, D)),
        Wd=0.5 * rng.normal(size=D),
    )
    return rng.normal(size=(D, H)), p, rng.normal(size=(D, H))


def bn_instance(rng, N=3, D=4, H=6):
    p = BnInputParams.init(D, H)
    p.scale = rng.uniform(0.5, 1.5, (D, H))
    p.shift = rng.normal(size=(D, H))
    return rng.normal(size=(N, D, H)), p, rng.normal(size=(N, D, H))


def backbone_instance(rng, kind, activation, shape=(5, 8, 3, 4), N=2):
    D, H, D2, H2 = shape
    W1 = rng.normal(size=(D2, D)) / np.sqrt(D)
    W2 = rng.normal(size=(H, H2)) / np.sqrt(H)
    bias = 0.1 * rng.normal(size=(D2, H2))
    if kind == "bilinear":
        p = BilinearLayerParams(W1, W2, bias, activation)
    else:
        W = rng.normal(size=(H, H))
        np.fill_diagonal(W, 1.0 / H)
        p = TablLayerParams(W1, W, np.array(rng.uniform(0.1, 0.9)), W2, bias, activation)
    return rng.normal(size=(N, D, H)), p, rng.normal(size=(N, D2, H2))


def _pre_activations_clear(caches) -> bool:
    return all(np.min(np.abs(c.Z)) > RELU_MARGIN for c in caches)


# ---------------------------------------------------------------------------
# Component checks
# ---------------------------------------------------------------------------


def check_bin(rng, corrupt=False) -> dict:
    X, p, dT = bin_instance(rng)
    f = lambda: float((dT * bin_forward(X, p)[0]).sum())
    g = bin_backward(bin_forward(X, p)[1], p, dT)
    analytic = dict(g.params.tensors(), X=g.dX)
    return _check(f, dict(p.tensors(), X=X), analytic, corrupt)


def check_dain(rng, corrupt=False) -> dict:
    X, p, dT = dain_instance(rng)
    f = lambda: float((dT * dain_forward(X, p)[0]).sum())
    g = dain_backward(dain_forward(X, p)[1], p, dT)
    return _check(f, dict(p.tensors(), X=X), dict(g.params.tensors(), X=g.dX), corrupt)


def check_bn(rng, corrupt=False) -> dict:
    X, p, dY = bn_instance(rng)
    f = lambda: float((dY * bn_input_forward(X, p, "train")[0]).sum())
    g = bn_input_backward(bn_input_forward(X, p, "train")[1], p, dY)
    return _check(f, dict(p.tensors(), X=X), dict(g.params.tensors(), X=g.dX), corrupt)


def check_backbone(rng, kind, activation="relu", corrupt=False) -> dict:
    fwd = bilinear_forward if kind == "bilinear" else tabl_forward
    while True:
        X, p, dY = backbone_instance(rng, kind, activation)
        _, cache = fwd(X, p)
        if activation != "relu" or _pre_activations_clear([cache]):
            break
    f = lambda: float((dY * fwd(X, p)[0]).sum())
    g = backbone_backward(cache, p, dY)
    tensors = dict(p.tensors(), X=X)
    analytic = dict(g.params.tensors(), X=g.dX)
    if kind == "tabl":
        # the fixed diagonal is not a trainable coordinate
        W = tensors.pop("W")
        gW = analytic.pop("W")
        off = ~np.eye(W.shape[0], dtype=bool)
        num = numeric_grad(f, W)
        errs = _check(f, tensors, analytic, corrupt)
        errs["W"] = rel_error(gW[off] * (1.001 if corrupt else 1.0), num[off])
        return errs
    return _check(f, tensors, analytic, corrupt)


def check_loss1(rng, corrupt=False) -> dict:
    logits = rng.normal(size=(4, 3)) * 2
    y = rng.integers(0, 3, size=4)
    f = lambda: loss_setting1(softmax(logits), y)[0]
    _, d = loss_setting1(softmax(logits), y)
    return _check(f, {"logits": logits}, {"logits": d}, corrupt)


def check_loss2(rng, corrupt=False) -> dict:
    logits = rng.normal(size=(4, 2)) * 2
    y = rng.integers(0, 2, size=4)
    h_hat = rng.uniform(0.5, 5.0, size=4)
    h = rng.integers(1, 6, size=4).astype(float)
    w = float(rng.uniform(0.1, 2.0))
    f = lambda: loss_setting2(softmax(logits), y, h_hat, h, w)[0]
    _, dl, dh = loss_setting2(softmax(logits), y, h_hat, h, w)
    return _check(f, {"logits": logits, "h_hat": h_hat}, {"logits": dl, "h_hat": dh}, corrupt)


def small_spec(normalizer="bin", head="softmax3", layers=True) -> ModelSpec:
    ls = (LayerSpec("bilinear", (5, 4)), LayerSpec("tabl", (3, 3))) if layers else ()
    return ModelSpec(normalizer, ls, head, (4, 6))


def check_model(rng, spec: ModelSpec, corrupt=False, N=3) -> dict:
    """Loss gradient of a full model (normalizer + backbone + head) on an ``N``-sample batch."""
    setting = 1 if spec.head == "softmax3" else 2
    cfg = TrainConfig(setting=setting, w_reg=0.5)
    while True:
        X = rng.normal(size=(N,) + spec.input_shape) * rng.uniform(0.5, 3.0) + rng.normal()
        static = fit_static(spec.normalizer, X) if spec.normalizer in ("zscore", "minmax") else None
        params = init_params(spec, int(rng.integers(1 << 31)), static)
        for layer in params.layers:
            layer.bias[...] = 0.1 * rng.normal(size=layer.bias.shape)
            if isinstance(layer, TablLayerParams):
                layer.lam[...] = rng.uniform(0.1, 0.9)
        if isinstance(params.norm, BinParams):
            params.norm.lam_a[...] = rng.uniform(0.2, 1.0)
            params.norm.lam_b[...] = rng.uniform(0.2, 1.0)
        elif isinstance(params.norm, DainParams):
            params.norm = dain_instance(rng, *spec.input_shape)[1]
        elif isinstance(params.norm, BnInputParams):
            params.norm.scale[...] = rng.uniform(0.5, 1.5, params.norm.scale.shape)
            params.norm.shift[...] = rng.normal(size=params.norm.shift.shape)
        y = rng.integers(0, spec.n_classes, size=N)
        h = rng.integers(1, 5, size=N).astype(float) if setting == 2 else None
        loss, grads, out = batch_loss(spec, params, X, y, h, cfg, train=True)
        if _pre_activations_clear(out.caches["layers"]):
            break
    def f():
        o = model_forward(spec, params, X, train=True)
        if setting == 1:
            return loss_setting1(o.probs, y)[0]
        return loss_setting2(o.probs, y, o.horizon, h, cfg.w_reg)[0]

    tensors = params.tensors()
    errs = {}
    for name, arr in tensors.items():
        a = grads[name] * (1.001 if corrupt else 1.0)
        num = numeric_grad(f, arr)
        if name.endswith(".W") and name.startswith("layer"):
            off = ~np.eye(arr.shape[0], dtype=bool)
            a, num = a[off], num[off]
        errs[name] = rel_error(a, num)
    return errs


LAYER_CHECKS = {
    "bin": check_bin,
    "dain": check_dain,
    "bn": check_bn,
    "bilinear_relu": lambda rng, corrupt=False: check_backbone(rng, "bilinear", "relu", corrupt),
    "bilinear_identity": lambda rng, corrupt=False: check_backbone(rng, "bilinear", "identity", corrupt),
    "tabl_relu": lambda rng, corrupt=False: check_backbone(rng, "tabl", "relu", corrupt),
    "tabl_identity": lambda rng, corrupt=False: check_backbone(rng, "tabl", "identity", corrupt),
    "loss_setting1": check_loss1,
    "loss_setting2": check_loss2,
    "head_softmax3": lambda rng, corrupt=False: check_model(rng, small_spec("none", "softmax3", False), corrupt),
    "head_softmax2_plus_regression": lambda rng, corrupt=False: check_model(
        rng, small_spec("none", "softmax2_plus_regression", False), corrupt
    ),
}

E2E_CHECKS = {
    f"model_{norm}_{head}": (lambda rng, corrupt=False, _n=norm, _h=head: check_model(rng, small_spec(_n, _h), corrupt))
    for norm in ("bin", "dain", "bn", "zscore", "minmax", "none")
    for head in ("softmax3", "softmax2_plus_regression")
}


# end-to-end variants carrying a learned normalizer get the full instance budget
PRIMARY_E2E = ("model_bin_softmax3", "model_bin_softmax2_plus_regression", "model_dain_softmax3", "model_bn_softmax3")


def run_gradcheck(
    instances: int = 100,
    extra_instances: int = 25,
    seed: int = 0,
    layer_tol: float = LAYER_TOL,
    e2e_tol: float = E2E_TOL,
    corrupt: Optional[str] = None,
    components: Optional[list] = None,
) -> list:
    """Run every check; returns one :class:`CheckRow` per (component, tensor).

    Layer, head and loss checks and the :data:`PRIMARY_E2E` models run
    ``instances`` times; the remaining end-to-end variants run
    ``extra_instances`` times. ``corrupt`` names a component whose analytic
    gradients are scaled by 1.001 before comparison (negative control).
    """
    rows = {}
    plan = [(n, f, instances, layer_tol) for n, f in LAYER_CHECKS.items()]
    plan += [(n, f, instances if n in PRIMARY_E2E else extra_instances, e2e_tol) for n, f in E2E_CHECKS.items()]
    for k, (name, fn, count, tol) in enumerate(plan):
        if components is not None and name not in components:
            continue
        rng = np.random.default_rng([seed, k])
        for _ in range(count):
            _collect(rows, name, fn(rng, corrupt=(corrupt == name)), tol)
    return list(rows.values())


def format_rows(rows) -> str:
    lines = [f"{'component':34s} {'tensor':18s} {'worst_rel_err':>14s} {'n':>5s}  result"]
    for r in rows:
        lines.append(f"{r.component:34s} {r.tensor:18s} {r.worst:14.3e} {r.instances:5d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
