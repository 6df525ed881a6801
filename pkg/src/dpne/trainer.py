"""Training loops: greedy layer-wise pretraining plus full-batch fine-tuning.

Three modes share one loop.  "sae" fine-tunes with squared weight decay,
"ncae" with the non-negativity penalty, and "dpne" adds the distribution
preserving penalty on the bottleneck with weight gamma.  gamma = 0 makes
"dpne" reproduce "ncae" bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .density import (
    calibrate_bandwidths,
    dp_gradient,
    dp_objective,
    high_conditionals,
    low_conditionals,
    pairwise_sq_dists,
)
from .errors import NonFinite, ShapeMismatch
from .network import (
    NetworkParams,
    backprop,
    bottleneck,
    decay_penalty,
    forward,
    mirrored_sizes,
    nonneg_penalty,
    pretrain_pair,
    reconstruction_loss,
)

MODES = ("dpne", "ncae", "sae")


@dataclass
class TrainConfig:
    """Hyperparameters for pretraining and fine-tuning.

    Defaults follow the usual operating point for image-like inputs:
    beta 0.003, gamma 100, eta 0.1, alpha 3, p 0.05, k 10, t 20, D 10.
    b_h_policy selects the embedding bandwidth: "fixed" uses b_h_value
    for every point, "calibrated" bisects a per-point bandwidth so each
    row of Q has entropy log2(t).
    """

    dim: int = 10
    hidden: tuple[int, ...] = (500, 500, 2000)
    beta: float = 0.003
    gamma: float = 100.0
    eta: float = 0.1
    maxiter: int = 400
    k: int = 10
    t: float = 20.0
    alpha: float = 3.0
    p: float = 0.05
    b_h_policy: str = "calibrated"
    b_h_value: float = 1.0
    pretrain_iters: int = 400
    early_stop: bool = False
    seed: int = 0

    @property
    def L(self) -> int:
        # mirrored depth: encoder layers (hidden plus bottleneck) doubled
        return 2 * (len(self.hidden) + 1)

    def validate(self) -> None:
        if self.dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"layer widths must be positive: hidden={self.hidden}, dim={self.dim}")
        if self.beta < 0 or self.gamma < 0 or self.alpha < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.eta <= 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if self.maxiter < 0 or self.pretrain_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if not self.t > 1:
            raise ValueError(f"target neighbourhood size must exceed 1, got {self.t}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"sparsity target must lie in (0, 1), got {self.p}")
        if self.b_h_policy not in ("fixed", "calibrated"):
            raise ValueError(f"unknown bandwidth policy {self.b_h_policy!r}")
        if self.b_h_value <= 0:
            raise ValueError(f"fixed bandwidth must be positive, got {self.b_h_value}")


class IterRecord(NamedTuple):
    iteration: int
    o_rec: float
    o_reg: float
    o_dp: float
    total: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])


def _values(x) -> np.ndarray:
    # accept either a raw array or a loaded DataMatrix
    v = getattr(x, "values", x)
    v = np.asarray(v, dtype=float)
    if v.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d data matrix, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFinite("data matrix contains non-finite values")
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("data must be normalised to [0, 1] before training")
    return v


def _reg_fn(mode: str):
    return decay_penalty if mode == "sae" else nonneg_penalty


def _pretrain_stack(
    x: np.ndarray, cfg: TrainConfig, mode: str, rng: np.random.Generator
) -> NetworkParams:
    """Greedy pairwise pretraining of the mirrored stack.

    Each encoder layer is trained as a two-layer autoencoder on the previous
    layer's activations; decoder halves are kept and mirrored around the
    bottleneck, which is trained with a linear hidden unit pair.
    """
    sizes = mirrored_sizes(x.shape[1], cfg.hidden, cfg.dim)
    enc_widths = (*cfg.hidden, cfg.dim)
    regularizer = "decay" if mode == "sae" else "nonneg"
    enc: list[tuple[np.ndarray, np.ndarray]] = []
    dec: list[tuple[np.ndarray, np.ndarray]] = []
    cur = x
    for idx, width in enumerate(enc_widths):
        is_bottleneck = idx == len(enc_widths) - 1
        enc_layer, dec_layer, cur = pretrain_pair(
            cur,
            width,
            cfg,
            regularizer=regularizer,
            linear_hidden=is_bottleneck,
            rng=rng,
        )
        enc.append(enc_layer)
        dec.append(dec_layer)
    weights = [w for w, _ in enc] + [w for w, _ in reversed(dec)]
    biases = [b for _, b in enc] + [b for _, b in reversed(dec)]
    return NetworkParams(sizes, weights, biases, linear_layer=len(enc_widths))


def _finetune(
    params: NetworkParams,
    x: np.ndarray,
    cfg: TrainConfig,
    mode: str,
    p_mat: np.ndarray | None,
) -> tuple[NetworkParams, np.ndarray, TrainLog]:
    n = x.shape[0]
    reg_fn = _reg_fn(mode)
    log = TrainLog()
    start = time.perf_counter()
    flat_streak = 0
    prev_total = None
    prev_b = None
    for it in range(cfg.maxiter):
        cache = forward(params, x)
        hmid = bottleneck(cache)
        o_rec = reconstruction_loss(cache, x)
        reg_val, reg_grads = reg_fn(params)
        o_dp = 0.0
        cot = None
        if mode == "dpne":
            if cfg.b_h_policy == "calibrated":
                # the embedding drifts slowly, so last iteration's bandwidths
                # bracket this iteration's almost everywhere
                b, _ = calibrate_bandwidths(
                    pairwise_sq_dists(hmid), cfg.t, warm_start=prev_b
                )
                prev_b = b
            else:
                b = cfg.b_h_value
            q = low_conditionals(hmid, b)
            o_dp = dp_objective(p_mat, q)
            if cfg.gamma != 0.0:
                cot = cfg.gamma * dp_gradient(p_mat, q, hmid, b)
        total = o_rec + 0.5 * cfg.beta * reg_val + cfg.gamma * o_dp
        if not np.isfinite(total):
            raise NonFinite(f"objective diverged at iteration {it}")
        log.records.append(
            IterRecord(it, o_rec, reg_val, o_dp, total, time.perf_counter() - start)
        )
        grads = backprop(params, cache, x, dp_grad_bottleneck=cot)
        new_w = []
        new_b = []
        for i in range(params.depth):
            step_w = grads.weights[i] / n
            if cfg.beta:
                step_w = step_w + 0.5 * cfg.beta * reg_grads.weights[i]
            new_w.append(params.weights[i] - cfg.eta * step_w)
            new_b.append(params.biases[i] - cfg.eta * (grads.biases[i] / n))
        params = NetworkParams(params.sizes, new_w, new_b, params.linear_layer)
        if cfg.early_stop:
            if prev_total is not None:
                rel = abs(total - prev_total) / max(abs(prev_total), 1e-12)
                flat_streak = flat_streak + 1 if rel < 1e-7 else 0
            prev_total = total
            if flat_streak >= 10:
                break
    h = bottleneck(forward(params, x))
    return params, h, log


def _check_train_input(xv: np.ndarray, config: TrainConfig) -> None:
    n, m = xv.shape
    if config.dim >= m:
        raise ValueError(f"embedding width {config.dim} must be below input width {m}")
    if n < config.k + 2:
        raise ValueError(f"need at least k + 2 = {config.k + 2} samples, got {n}")


def train_dpne(x, config: TrainConfig) -> tuple[NetworkParams, np.ndarray, TrainLog]:
    """Pretrain, then fine-tune with the distribution preserving penalty.

    Input conditionals P are computed once from the raw data; embedding
    conditionals Q are recomputed from the bottleneck every iteration.
    Returns the trained parameters, the final embedding, and the log.
    """
    config.validate()
    xv = _values(x)
    _check_train_input(xv, config)
    rng = np.random.default_rng(config.seed)
    p_mat = high_conditionals(xv, config.k)
    params = _pretrain_stack(xv, config, "dpne", rng)
    return _finetune(params, xv, config, "dpne", p_mat)


def train_baseline(
    x, config: TrainConfig, mode: str
) -> tuple[NetworkParams, np.ndarray, TrainLog]:
    """Train without the distribution penalty: "ncae" or "sae"."""
    if mode not in ("ncae", "sae"):
        raise ValueError(f"baseline mode must be 'ncae' or 'sae', got {mode!r}")
    config.validate()
    xv = _values(x)
    _check_train_input(xv, config)
    rng = np.random.default_rng(config.seed)
    params = _pretrain_stack(xv, config, mode, rng)
    return _finetune(params, xv, config, mode, None)


def train(x, config: TrainConfig, mode: str = "dpne"):
    """Dispatch on mode; see train_dpne and train_baseline."""
    if mode == "dpne":
        return train_dpne(x, config)
    return train_baseline(x, config, mode)


def embed(params: NetworkParams, x) -> np.ndarray:
    """Map data through the trained encoder to the bottleneck layer."""
    xv = _values(x)
    return bottleneck(forward(params, xv))
