"""Desk-scale trainer for tiny polynomial-activation networks.

Polynomial activations only approximate ReLU inside a bounded interval
[-c, c], so training has to keep pre-activations inside that interval.  This
module implements the three stabilizers used for that purpose and verifies
their supporting algebra numerically:

* a clip-range penalty added to the batch loss (mean CE plus the per-layer
  distance of pre-activations from [-c, c]);
* pre-activation clipping during the forward pass, applied after the penalty
  is computed from the unclipped values so its gradient survives;
* a warm-up schedule that ramps the penalty strength over the first epochs.

``lemma1_check`` and ``lemma2_check`` confirm, on a live network, that one
SGD step on layer l changes that layer's pre-activations by
``-eta * ||h||^2 * (g + zeta * d/||d||)`` and that the penalty component has a
strictly negative inner product with the clipping residual d, which is the
mechanism that pulls out-of-range pre-activations back toward the interval.

Everything here is deliberately small: dense bias-free layers, manual
backprop, CPU only.  It is a study harness, not a CIFAR trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .polyfit import FixedPointPoly, fit_relu_poly

__all__ = [
    "TrainError",
    "TrainConfig",
    "TinyMLP",
    "Batch",
    "warmup_zeta",
    "penalty_loss",
    "train_step",
    "train",
    "lemma1_check",
    "lemma2_check",
    "LemmaReport",
    "make_synthetic",
    "EpochStats",
]


class TrainError(Exception):
    """Raised for invalid training configuration or non-finite losses."""


_DEFAULT_ALPHAS = (1 / 100, 1 / 50, 1 / 10, 1 / 5)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for penalty-regularized polynomial training.

    ``alphas`` are the warm-up factors for epochs 1..t_warm and must be
    strictly increasing inside (0, 1).
    """

    c: float = 2.0
    zeta: float = 1e-3
    t_warm: int = 4
    alphas: Tuple[float, ...] = _DEFAULT_ALPHAS
    lr: float = 0.1
    batch_size: int = 32
    epochs: int = 12
    seed: int = 0

    def __post_init__(self) -> None:
        if self.c <= 0:
            raise TrainError(f"clip bound c must be > 0, got {self.c}")
        if self.zeta <= 0:
            raise TrainError(f"penalty strength zeta must be > 0, got {self.zeta}")
        if self.t_warm != len(self.alphas):
            raise TrainError(
                f"t_warm={self.t_warm} but {len(self.alphas)} warm-up factors given")
        seq = (0.0,) + tuple(self.alphas) + (1.0,)
        if any(a >= b for a, b in zip(seq, seq[1:])):
            raise TrainError(f"warm-up factors must satisfy 0 < a_1 < ... < a_T < 1: {self.alphas}")


Batch = Tuple[np.ndarray, np.ndarray]


def warmup_zeta(cfg: TrainConfig, t: int) -> float:
    """Penalty strength at epoch ``t`` (1-based): ``alpha_t * zeta`` during
    warm-up, plain ``zeta`` afterwards."""
    if t < 1:
        raise TrainError(f"epoch index must be >= 1, got {t}")
    if t <= cfg.t_warm:
        return cfg.alphas[t - 1] * cfg.zeta
    return cfg.zeta


@dataclass
class TinyMLP:
    """Dense bias-free network ``h_l = p(clip(W_l h_{l-1}))`` with a shared
    polynomial activation after every layer, the last included.

    ``last_z`` and ``last_h`` cache the unclipped pre-activations and layer
    outputs of the most recent forward pass (``last_h[0]`` is the input).
    """

    weights: List[np.ndarray]
    activation: FixedPointPoly
    last_z: List[np.ndarray] = field(default_factory=list)
    last_h: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.weights) < 2:
            raise TrainError("need at least two layers")
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise TrainError(f"layer shapes do not chain: {a.shape} -> {b.shape}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @classmethod
    def init(cls, sizes: Sequence[int], activation: Optional[FixedPointPoly] = None,
             seed: int = 0) -> "TinyMLP":
        """Gaussian init scaled by 1/sqrt(fan_in) so early pre-activations
        start inside the approximation interval."""
        if activation is None:
            activation, _ = fit_relu_poly(d=2, c=2.0, b=10)
        rng = np.random.default_rng(seed)
        ws = [rng.normal(0.0, 1.0 / np.sqrt(nin), size=(nout, nin))
              for nin, nout in zip(sizes, sizes[1:])]
        return cls(weights=ws, activation=activation)

    def copy(self) -> "TinyMLP":
        return TinyMLP(weights=[w.copy() for w in self.weights],
                       activation=self.activation)

    # -- forward ------------------------------------------------------------

    def _poly(self, z: np.ndarray) -> np.ndarray:
        coeffs = self.activation.real_coeffs()
        acc = np.full_like(z, coeffs[-1])
        for k in range(len(coeffs) - 2, -1, -1):
            acc = acc * z + coeffs[k]
        return acc

    def _poly_deriv(self, z: np.ndarray) -> np.ndarray:
        coeffs = self.activation.real_coeffs()
        acc = np.zeros_like(z)
        for k in range(len(coeffs) - 1, 0, -1):
            acc = acc * z + k * coeffs[k]
        return acc

    def forward(self, x: np.ndarray, clip_c: Optional[float] = None) -> np.ndarray:
        """Run the network on a batch ``x`` of shape (B, n_0) and cache
        pre-activations.  With ``clip_c`` set (training mode), pre-activations
        are clipped to [-clip_c, clip_c] before the activation; the cached
        ``last_z`` always holds the unclipped values, which is what the
        penalty is defined on."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise TrainError(f"expected a nonempty (B, n0) batch, got shape {x.shape}")
        self.last_z = []
        self.last_h = [x]
        h = x
        for w in self.weights:
            z = h @ w.T
            self.last_z.append(z)
            zc = np.clip(z, -clip_c, clip_c) if clip_c is not None else z
            h = self._poly(zc)
            self.last_h.append(h)
        return h


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean CE over the batch and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    ce = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return ce, grad / n


def _clip_residual(z: np.ndarray, c: float) -> np.ndarray:
    return z - np.clip(z, -c, c)


def penalty_loss(net: TinyMLP, batch: Batch, cfg: TrainConfig, t: int) -> Tuple[float, float, float]:
    """Batch loss at epoch ``t``: ``(total, ce, pen)`` where
    ``total = ce + zeta_t * pen``.

    ``pen`` is the per-sample mean of the layer-averaged l2 norm of the
    clipping residual ``z - clip(z)``; it is zero exactly when every
    pre-activation lies inside [-c, c].  Runs the training-mode forward
    (clipped) and reads the penalty off the cached unclipped pre-activations.
    """
    x, y = batch
    logits = net.forward(x, clip_c=cfg.c)
    ce, _ = _cross_entropy(logits, y)
    pen = _batch_penalty(net.last_z, cfg.c)
    total = ce + warmup_zeta(cfg, t) * pen
    if not np.isfinite(total):
        raise TrainError(f"non-finite loss: ce={ce} pen={pen}")
    return total, ce, pen


def _batch_penalty(zs: List[np.ndarray], c: float) -> float:
    l = len(zs)
    per_sample = sum(np.linalg.norm(_clip_residual(z, c), axis=1) for z in zs) / l
    return float(per_sample.mean())


def _gradients(net: TinyMLP, batch: Batch, cfg: TrainConfig, t: int) -> Tuple[float, float, float, List[np.ndarray]]:
    """Loss pieces and exact gradients of the implemented loss.

    The penalty contributes its subgradient d/||d|| directly at each layer's
    pre-activation; the clip in the forward pass zeroes downstream gradient
    flow for out-of-range entries, which is exactly why the penalty must be
    computed before clipping.
    """
    x, y = batch
    zeta_t = warmup_zeta(cfg, t)
    logits = net.forward(x, clip_c=cfg.c)
    ce, dlogits = _cross_entropy(logits, y)
    pen = _batch_penalty(net.last_z, cfg.c)
    total = ce + zeta_t * pen
    if not np.isfinite(total):
        raise TrainError(f"non-finite loss: ce={ce} pen={pen}")

    n = x.shape[0]
    depth = net.depth
    grads: List[np.ndarray] = [np.zeros_like(w) for w in net.weights]
    dh = dlogits
    for l in range(depth - 1, -1, -1):
        z = net.last_z[l]
        zc = np.clip(z, -cfg.c, cfg.c)
        inside = (np.abs(z) <= cfg.c).astype(np.float64)
        dz = dh * net._poly_deriv(zc) * inside
        d = _clip_residual(z, cfg.c)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        scale = np.divide(zeta_t / (n * depth), norms, out=np.zeros_like(norms),
                          where=norms > 0)
        dz = dz + scale * d
        grads[l] = dz.T @ net.last_h[l]
        dh = dz @ net.weights[l]
    return total, ce, pen, grads


def train_step(net: TinyMLP, batch: Batch, cfg: TrainConfig, t: int) -> Tuple[TinyMLP, float, float, float]:
    """One SGD step on the penalized batch loss; returns the updated network
    and ``(total, ce, pen)`` measured before the step."""
    total, ce, pen, grads = _gradients(net, batch, cfg, t)
    out = net.copy()
    for w, g in zip(out.weights, grads):
        w -= cfg.lr * g
    return out, total, ce, pen


@dataclass
class EpochStats:
    epoch: int
    zeta_t: float
    loss: float
    ce: float
    pen: float
    accuracy: float


def train(net: TinyMLP, data: Batch, cfg: TrainConfig) -> Tuple[TinyMLP, List[EpochStats]]:
    """Mini-batch SGD over ``cfg.epochs`` epochs with deterministic shuffling.

    Per-epoch stats average the pre-step batch losses; accuracy is measured
    after the epoch with the inference forward (no clipping).
    """
    x, y = data
    if x.shape[0] == 0:
        raise TrainError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    history: List[EpochStats] = []
    for t in range(1, cfg.epochs + 1):
        order = rng.permutation(x.shape[0])
        totals: List[Tuple[float, float, float]] = []
        for lo in range(0, x.shape[0], cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            net, total, ce, pen = train_step(net, (x[idx], y[idx]), cfg, t)
            totals.append((total, ce, pen))
        mean = np.mean(totals, axis=0)
        pred = net.forward(x).argmax(axis=1)
        history.append(EpochStats(epoch=t, zeta_t=warmup_zeta(cfg, t),
                                  loss=float(mean[0]), ce=float(mean[1]),
                                  pen=float(mean[2]),
                                  accuracy=float((pred == y).mean())))
    return net, history


def make_synthetic(n: int = 200, seed: int = 0, margin: float = 1.0) -> Batch:
    """Two linearly separable 2-D gaussian blobs, ``n`` samples total."""
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.normal(0.0, 0.35, size=(half, 2)) + np.array([-margin, -margin])
    b = rng.normal(0.0, 0.35, size=(n - half, 2)) + np.array([margin, margin])
    x = np.vstack([a, b])
    y = np.array([0] * half + [1] * (n - half))
    return x, y


# -- lemma verification -----------------------------------------------------


@dataclass
class LemmaLayerResult:
    layer: int
    d_norm: float
    penalty_branch: bool
    rel_err: float
    inner_product: Optional[float] = None
    closed_form: Optional[float] = None


@dataclass
class LemmaReport:
    """Numerical check of one lemma across all layers of a network."""

    lemma: int
    tolerance: float
    layers: List[LemmaLayerResult]
    passed: bool

    def to_json(self) -> Dict:
        return {
            "lemma": self.lemma,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "layers": [
                {k: v for k, v in vars(r).items() if v is not None}
                for r in self.layers
            ],
        }


def _layer_step_pieces(net: TinyMLP, sample: Batch, cfg: TrainConfig, layer: int):
    """Backprop the single-sample loss ``CE + zeta * ||d_layer||`` and return
    everything needed to step only ``W_layer``: (h_prev, z, d, g, dW_ce, dW_pen)."""
    x, y = sample
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if x.shape[0] != 1:
        raise TrainError("lemma checks take a single sample")
    net.forward(x, clip_c=cfg.c)
    z = net.last_z[layer][0]
    h_prev = net.last_h[layer][0]
    d = _clip_residual(z, cfg.c)

    # g = dCE/dz at this layer, via backprop from the logits.
    _, dh = _cross_entropy(net.last_h[-1], y)
    for l in range(net.depth - 1, layer - 1, -1):
        zl = net.last_z[l]
        zc = np.clip(zl, -cfg.c, cfg.c)
        dz = dh * net._poly_deriv(zc) * (np.abs(zl) <= cfg.c)
        if l == layer:
            g = dz[0]
            break
        dh = dz @ net.weights[l]

    dw_ce = np.outer(g, h_prev)
    dn = float(np.linalg.norm(d))
    dw_pen = cfg.zeta * np.outer(d / dn, h_prev) if dn > 0 else np.zeros_like(dw_ce)
    return h_prev, z, d, g, dw_ce, dw_pen


def _rel_err(measured: np.ndarray, predicted: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(predicted))), 1e-300)
    return float(np.max(np.abs(measured - predicted)) / scale)


def lemma1_check(net: TinyMLP, sample: Batch, cfg: TrainConfig,
                 tol: float = 1e-8) -> LemmaReport:
    """After one SGD step on layer l alone (per-sample loss CE + zeta*||d||),
    the measured pre-activation change must equal
    ``-eta*||h||^2*g - eta*zeta*||h||^2*d/||d||`` at that layer; exact up to
    float roundoff since z is linear in W with h held fixed."""
    results = []
    for layer in range(net.depth):
        h_prev, z, d, g, dw_ce, dw_pen = _layer_step_pieces(net, sample, cfg, layer)
        dn = float(np.linalg.norm(d))
        dw = -cfg.lr * (dw_ce + dw_pen)
        measured = (net.weights[layer] + dw) @ h_prev - z
        h2 = float(h_prev @ h_prev)
        predicted = -cfg.lr * h2 * g
        if dn > 0:
            predicted = predicted - cfg.lr * cfg.zeta * h2 * d / dn
        results.append(LemmaLayerResult(
            layer=layer + 1, d_norm=dn, penalty_branch=dn > 0,
            rel_err=_rel_err(measured, predicted)))
    passed = all(r.rel_err <= tol for r in results)
    return LemmaReport(lemma=1, tolerance=tol, layers=results, passed=passed)


def lemma2_check(net: TinyMLP, sample: Batch, cfg: TrainConfig,
                 tol: float = 1e-8) -> LemmaReport:
    """The penalty component of the update satisfies
    ``<dz_pen, d> = -eta*zeta*||h||^2*||d|| < 0`` whenever ||d|| > 0, i.e. it
    always pulls out-of-range pre-activations back toward the interval."""
    results = []
    for layer in range(net.depth):
        h_prev, z, d, g, dw_ce, dw_pen = _layer_step_pieces(net, sample, cfg, layer)
        dn = float(np.linalg.norm(d))
        if dn == 0:
            results.append(LemmaLayerResult(layer=layer + 1, d_norm=0.0,
                                            penalty_branch=False, rel_err=0.0))
            continue
        dz_pen = (-cfg.lr * dw_pen) @ h_prev
        inner = float(dz_pen @ d)
        h2 = float(h_prev @ h_prev)
        closed = -cfg.lr * cfg.zeta * h2 * dn
        err = abs(inner - closed) / max(abs(closed), 1e-300)
        results.append(LemmaLayerResult(
            layer=layer + 1, d_norm=dn, penalty_branch=True, rel_err=err,
            inner_product=inner, closed_form=closed))
    passed = all(r.rel_err <= tol for r in results) and all(
        r.inner_product < 0 for r in results if r.penalty_branch)
    return LemmaReport(lemma=2, tolerance=tol, layers=results, passed=passed)
