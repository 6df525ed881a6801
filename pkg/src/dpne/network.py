"""Mirrored sigmoid autoencoder with a linear bottleneck.

Layer widths run (M, hidden..., D, reversed hidden..., M).  All layers are
sigmoid except the bottleneck, which is linear so the embedding is not
squashed into the unit cube.  Gradients are per-sample sums; the trainer
divides by N, so a weight update sees the mean reconstruction gradient
plus any regulariser terms at full strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch


@dataclass
class NetworkParams:
    """Weights and biases of a feed-forward net.

    weights[i] maps layer i to layer i + 1 and has shape
    (sizes[i + 1], sizes[i]); biases[i] belongs to layer i + 1.
    linear_layer is the 1-based index of the identity-activation layer,
    or None when every layer is sigmoid.
    """

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    linear_layer: int | None = None

    @property
    def depth(self) -> int:
        return len(self.weights)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.linear_layer,
        )


@dataclass
class ForwardCache:
    """Activations from one forward pass; hs[0] is the input batch."""

    zs: list
    hs: list


@dataclass
class ParamGrads:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "ParamGrads":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )


def mirrored_sizes(m: int, hidden: tuple[int, ...], d: int) -> tuple[int, ...]:
    """Symmetric layer widths (M, hidden..., D, hidden reversed..., M)."""
    if m < 1 or d < 1 or any(h < 1 for h in hidden):
        raise ShapeMismatch(f"layer widths must be positive: M={m}, hidden={hidden}, D={d}")
    return (m, *hidden, d, *reversed(hidden), m)


def random_params(
    sizes: tuple[int, ...], rng: np.random.Generator, linear_layer: int | None = None
) -> NetworkParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    if len(sizes) < 2:
        raise ShapeMismatch("need at least an input and an output layer")
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-r, r, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(tuple(sizes), weights, biases, linear_layer)


def _act_deriv(params: NetworkParams, h: np.ndarray, layer: int) -> np.ndarray:
    if layer == params.linear_layer:
        return np.ones_like(h)
    return h * (1.0 - h)


def forward(params: NetworkParams, x: np.ndarray) -> ForwardCache:
    """Run the batch through the net, caching pre- and post-activations."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ShapeMismatch(
            f"input shape {x.shape} does not match input width {params.sizes[0]}"
        )
    zs: list = [None]
    hs: list = [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if (i + 1) == params.linear_layer else expit(z)
        zs.append(z)
        hs.append(h)
    return ForwardCache(zs, hs)


def bottleneck(cache: ForwardCache) -> np.ndarray:
    """The middle-layer activations of a mirrored net."""
    mid = (len(cache.hs) - 1) // 2
    return cache.hs[mid]


def reconstruction_loss(cache: ForwardCache, x: np.ndarray) -> float:
    """Mean over samples of the squared reconstruction error."""
    return float(((cache.hs[-1] - x) ** 2).sum()) / cache.hs[-1].shape[0]


def mean_activations(cache: ForwardCache, layer: int) -> np.ndarray:
    return cache.hs[layer].mean(axis=0)


def sparsity_penalty(cache: ForwardCache, layer: int, p: float) -> float:
    """KL(p || mean activation) summed over the units of one sigmoid layer.

    Mean activations are clamped to [1e-8, 1 - 1e-8] so the logs stay finite.
    """
    phat = np.clip(mean_activations(cache, layer), 1e-8, 1.0 - 1e-8)
    return float(
        np.sum(p * np.log(p / phat) + (1.0 - p) * np.log((1.0 - p) / (1.0 - phat)))
    )


def _sparsity_units(cache: ForwardCache, layer: int, p: float) -> np.ndarray:
    # d KL / d phat, with the same clamp as the penalty
    phat = np.clip(mean_activations(cache, layer), 1e-8, 1.0 - 1e-8)
    return -p / phat + (1.0 - p) / (1.0 - phat)


def nonneg_penalty(params: NetworkParams) -> tuple[float, ParamGrads]:
    """Quadratic penalty on negative weights: J(w) = w^2 for w < 0, else 0.

    Returns the penalty value and its gradient (2w on negative entries,
    zero elsewhere; biases are unconstrained).
    """
    grads = ParamGrads.zeros_like(params)
    value = 0.0
    for i, w in enumerate(params.weights):
        neg = np.minimum(w, 0.0)
        value += float((neg**2).sum())
        grads.weights[i] = 2.0 * neg
    return value, grads


def decay_penalty(params: NetworkParams) -> tuple[float, ParamGrads]:
    """Plain squared-norm weight decay, Frobenius over all weight matrices."""
    grads = ParamGrads.zeros_like(params)
    value = 0.0
    for i, w in enumerate(params.weights):
        value += float((w**2).sum())
        grads.weights[i] = 2.0 * w
    return value, grads


def backprop(
    params: NetworkParams,
    cache: ForwardCache,
    x: np.ndarray,
    dp_grad_bottleneck: np.ndarray | None = None,
    sparsity: tuple[int, float, float] | None = None,
) -> ParamGrads:
    """Per-sample-summed gradients of the reconstruction objective.

    The output delta is 2 (xhat - x) * sigma'(z), i.e. the exact derivative
    of the summed squared error.  Optional extras ride along the same pass:

    * dp_grad_bottleneck: an (N, D) cotangent added at the middle layer,
      so the result also carries the gradient of <G, H_mid>.
    * sparsity: (layer, p, alpha); adds alpha * dKL/dphat to every sample's
      delta at that layer.

    Dividing the summed output by N yields the exact gradient of
    reconstruction_loss (which is a mean) plus alpha * sparsity_penalty.
    """
    depth = params.depth
    hs = cache.hs
    grads = ParamGrads.zeros_like(params)
    delta = 2.0 * (hs[depth] - x) * _act_deriv(params, hs[depth], depth)
    grads.weights[depth - 1] = delta.T @ hs[depth - 1]
    grads.biases[depth - 1] = delta.sum(axis=0)
    mid = depth // 2
    for layer in range(depth - 1, 0, -1):
        pre = delta @ params.weights[layer]
        if dp_grad_bottleneck is not None and layer == mid:
            if dp_grad_bottleneck.shape != hs[mid].shape:
                raise ShapeMismatch(
                    f"bottleneck cotangent {dp_grad_bottleneck.shape} "
                    f"vs activations {hs[mid].shape}"
                )
            pre = pre + dp_grad_bottleneck
        if sparsity is not None and layer == sparsity[0]:
            _, p, alpha = sparsity
            pre = pre + alpha * _sparsity_units(cache, layer, p)[None, :]
        delta = pre * _act_deriv(params, hs[layer], layer)
        grads.weights[layer - 1] = delta.T @ hs[layer - 1]
        grads.biases[layer - 1] = delta.sum(axis=0)
    return grads


def fd_param_gradient(fn, params: NetworkParams, step: float = 1e-5) -> ParamGrads:
    """Central finite differences of a scalar function over every parameter.

    Intended for tiny test networks; cost is two forward passes per entry.
    """
    grads = ParamGrads.zeros_like(params)
    work = params.copy()
    for i, w in enumerate(work.weights):
        flat = w.reshape(-1)
        gflat = grads.weights[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(work)
            flat[j] = orig - step
            fm = fn(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
    for i, b in enumerate(work.biases):
        gflat = grads.biases[i]
        for j in range(b.size):
            orig = b[j]
            b[j] = orig + step
            fp = fn(work)
            b[j] = orig - step
            fm = fn(work)
            b[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
    return grads


def pretrain_pair(
    x: np.ndarray,
    hidden: int,
    config,
    *,
    regularizer: str = "nonneg",
    linear_hidden: bool = False,
    rng: np.random.Generator | None = None,
):
    """Train one two-layer autoencoder by full-batch gradient descent.

    config supplies eta, beta, alpha, p, pretrain_iters and seed.  The
    objective is mean reconstruction error plus alpha * KL sparsity plus
    (beta/2) times the chosen weight regulariser ("nonneg" or "decay").
    The sparsity term is skipped when the hidden layer is linear, since
    its activations are unbounded and the Bernoulli KL is meaningless.

    Returns ((w_enc, b_enc), (w_dec, b_dec), hidden_activations), the
    pieces the greedy stack builder needs.
    """
    x = np.asarray(x, dtype=float)
    n, m = x.shape
    if hidden < 1:
        raise ShapeMismatch(f"hidden width must be positive, got {hidden}")
    if regularizer == "nonneg":
        reg_fn = nonneg_penalty
    elif regularizer == "decay":
        reg_fn = decay_penalty
    else:
        raise ValueError(f"unknown regularizer {regularizer!r}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    pair = random_params((m, hidden, m), rng, linear_layer=1 if linear_hidden else None)
    use_sparsity = config.alpha > 0.0 and not linear_hidden
    sparsity = (1, config.p, config.alpha) if use_sparsity else None
    for _ in range(config.pretrain_iters):
        cache = forward(pair, x)
        reg_grads = reg_fn(pair)[1]
        grads = backprop(pair, cache, x, sparsity=sparsity)
        for i in range(pair.depth):
            step_w = grads.weights[i] / n
            if config.beta:
                step_w = step_w + 0.5 * config.beta * reg_grads.weights[i]
            pair.weights[i] = pair.weights[i] - config.eta * step_w
            pair.biases[i] = pair.biases[i] - config.eta * (grads.biases[i] / n)
    final = forward(pair, x)
    return (
        (pair.weights[0], pair.biases[0]),
        (pair.weights[1], pair.biases[1]),
        final.hs[1],
    )


def pair_objective(pair: NetworkParams, x: np.ndarray, config, regularizer: str) -> float:
    """The objective pretrain_pair descends, for inspection and tests."""
    cache = forward(pair, x)
    reg_fn = nonneg_penalty if regularizer == "nonneg" else decay_penalty
    obj = reconstruction_loss(cache, x) + 0.5 * config.beta * reg_fn(pair)[0]
    if config.alpha > 0.0 and pair.linear_layer is None:
        obj += config.alpha * sparsity_penalty(cache, 1, config.p)
    return obj
