"""Command line front end.

Verbs: synth, train, embed, eval, gradcheck, fields.  Every option can
also come from a key=value config file (--config); explicit flags win
over the file, the file wins over built-in defaults.  Each run writes a
manifest of the resolved options next to its outputs, and a manifest is
itself a valid config file, so a run can be replayed exactly.

Exit codes: 0 success, 1 validation or file format problems, 2 numerical
failures (diverged training, failed gradient checks).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .cluster_eval import evaluate_clustering
from .data_io import (
    DataMatrix,
    SyntheticSpec,
    gen_synthetic,
    load_delimited,
    load_embedding,
    load_idx,
    load_labels,
    load_params,
    save_embedding,
    save_labels,
    save_params,
    save_receptive_fields,
    save_train_log,
)
from .density import (
    calibrate_bandwidths,
    dp_gradient,
    dp_objective,
    high_conditionals,
    low_conditionals,
    pairwise_sq_dists,
)
from .errors import DegenerateBandwidth, DpneError, NonFinite
from .network import (
    backprop,
    fd_param_gradient,
    forward,
    nonneg_penalty,
    random_params,
    reconstruction_loss,
    sparsity_penalty,
)
from .trainer import TrainConfig, train, embed as embed_data

MANIFEST_NAME = "manifest.txt"
# informational manifest keys a replay should ignore
MANIFEST_SKIP = {"command", "version", "input-rows", "input-cols"}


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _str(s: str):
    return s if s != "" else None


def _opt_int(s: str):
    return None if s == "" else int(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _hidden(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(tok) for tok in s.split(","))


def _choice(*options: str) -> Callable[[str], str]:
    def coerce(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return coerce


@dataclass(frozen=True)
class Opt:
    name: str
    coerce: Callable
    default: object
    help: str


_COMMON = [
    Opt("seed", _int, 0, "rng seed"),
    Opt("out", _str, None, "output directory"),
    Opt("config", _str, None, "key=value file supplying defaults for any option"),
]

_DATA_OPTS = [
    Opt("data", _str, None, "delimited text data matrix"),
    Opt("delimiter", _str, None, "cell delimiter (default: any whitespace)"),
    Opt("label-column", _opt_int, None, "column of --data holding integer labels"),
    Opt("idx-images", _str, None, "IDX image file (alternative to --data)"),
    Opt("idx-labels", _str, None, "IDX label file paired with --idx-images"),
]

_TRAIN_OPTS = [
    Opt("mode", _choice("dpne", "ncae", "sae"), "dpne", "training mode"),
    Opt("dim", _int, 10, "embedding width"),
    Opt("hidden", _hidden, (500, 500, 2000), "encoder hidden widths, comma separated"),
    Opt("beta", _float, 0.003, "weight of the weight regulariser"),
    Opt("gamma", _float, 100.0, "weight of the distribution preserving penalty"),
    Opt("eta", _float, 0.1, "learning rate"),
    Opt("maxiter", _int, 400, "fine-tuning iterations"),
    Opt("k", _int, 10, "neighbour rank for input bandwidths"),
    Opt("t", _float, 20.0, "target neighbourhood size for calibrated bandwidths"),
    Opt("alpha", _float, 3.0, "sparsity weight during pretraining"),
    Opt("p", _float, 0.05, "sparsity target activation"),
    Opt("b-h-policy", _choice("fixed", "calibrated"), "calibrated", "embedding bandwidth policy"),
    Opt("b-h-value", _float, 1.0, "embedding bandwidth when --b-h-policy fixed"),
    Opt("pretrain-iters", _int, 400, "gradient steps per pretraining pair"),
    Opt("early-stop", _bool, False, "stop when the objective plateaus"),
]

COMMANDS = {
    "synth": [
        Opt("clusters", _int, 4, "number of latent clusters"),
        Opt("per-cluster", _int, 250, "points per cluster"),
        Opt("std", _float, 1.0, "latent cluster standard deviation"),
        *_COMMON,
    ],
    "train": [*_DATA_OPTS, *_TRAIN_OPTS, *_COMMON],
    "embed": [
        Opt("params", _str, None, "trained parameter container (npz)"),
        *_DATA_OPTS,
        *_COMMON,
    ],
    "eval": [
        Opt("embedding", _str, None, "embedding text file"),
        Opt("labeled", _bool, False, "embedding file carries a trailing label column"),
        Opt("labels", _str, None, "separate labels file"),
        Opt("k-clusters", _opt_int, None, "cluster count (default: number of distinct labels)"),
        Opt("restarts", _int, 10, "k-means restarts per repeat"),
        Opt("repeats", _int, 10, "independent k-means repeats"),
        *_COMMON,
    ],
    "gradcheck": [
        Opt("trials", _int, 100, "descent-direction trials for the embedding penalty"),
        *_COMMON,
    ],
    "fields": [
        Opt("params", _str, None, "trained parameter container (npz)"),
        Opt("layer", _int, 1, "1-based weight layer to visualise"),
        Opt("count", _int, 100, "number of unit rows to write"),
        Opt("side", _opt_int, None, "image side (default: sqrt of fan-in)"),
        *_COMMON,
    ],
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; our contract reserves 2 for
    # numerical failures, so remap usage errors to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpne", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dpne {__version__}")
    sub = parser.add_subparsers(dest="command")
    for command, opts in COMMANDS.items():
        sp = sub.add_parser(command, help=f"{command} (see module docs)")
        for opt in opts:
            sp.add_argument(f"--{opt.name}", dest=opt.name.replace("-", "_"),
                            default=None, metavar="V", help=opt.help)
    return parser


def _read_config(path: str) -> dict:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _merge(command: str, ns: argparse.Namespace) -> dict:
    opts = {opt.name: opt for opt in COMMANDS[command]}
    raw: dict = {}
    if ns.config:
        for key, val in _read_config(ns.config).items():
            name = key.replace("_", "-")
            if name in MANIFEST_SKIP:
                continue
            if name not in opts:
                raise ValueError(f"unknown config key {key!r} for command {command!r}")
            raw[name] = val
    for name in opts:
        flag = getattr(ns, name.replace("-", "_"))
        if flag is not None:
            raw[name] = flag
    merged: dict = {}
    for name, opt in opts.items():
        if name in raw:
            try:
                merged[name] = opt.coerce(raw[name])
            except ValueError as exc:
                raise ValueError(f"bad value for --{name}: {exc}") from None
        else:
            merged[name] = opt.default
    return merged


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_manifest(out_dir: Path, command: str, merged: dict, extra: dict | None = None) -> None:
    lines = [f"command={command}", f"version={__version__}"]
    for name in sorted(merged):
        if name == "config":
            continue
        lines.append(f"{name}={_fmt(merged[name])}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={_fmt(value)}")
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require_out(merged: dict) -> Path:
    if not merged["out"]:
        raise ValueError("--out is required")
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_input(merged: dict) -> DataMatrix:
    if merged["idx-images"]:
        return load_idx(merged["idx-images"], merged["idx-labels"])
    if merged["data"]:
        return load_delimited(merged["data"], merged["delimiter"], merged["label-column"])
    raise ValueError("need --data or --idx-images")


def cmd_synth(merged: dict) -> int:
    out = _require_out(merged)
    spec = SyntheticSpec(
        clusters=merged["clusters"],
        points_per_cluster=merged["per-cluster"],
        cluster_std=merged["std"],
        seed=merged["seed"],
    )
    dm, latent = gen_synthetic(spec, with_latent=True)
    save_embedding(out / "data.txt", dm.values)
    save_labels(out / "labels.txt", dm.labels)
    save_embedding(out / "latent.txt", latent)
    _write_manifest(out, "synth", merged, {"input-rows": dm.n, "input-cols": dm.m})
    print(f"wrote {dm.n} x {dm.m} synthetic matrix to {out}")
    return 0


def _train_config(merged: dict) -> TrainConfig:
    cfg = TrainConfig(
        dim=merged["dim"],
        hidden=merged["hidden"],
        beta=merged["beta"],
        gamma=merged["gamma"],
        eta=merged["eta"],
        maxiter=merged["maxiter"],
        k=merged["k"],
        t=merged["t"],
        alpha=merged["alpha"],
        p=merged["p"],
        b_h_policy=merged["b-h-policy"],
        b_h_value=merged["b-h-value"],
        pretrain_iters=merged["pretrain-iters"],
        early_stop=merged["early-stop"],
        seed=merged["seed"],
    )
    cfg.validate()
    return cfg


def cmd_train(merged: dict) -> int:
    out = _require_out(merged)
    dm = _load_input(merged)
    cfg = _train_config(merged)
    params, h, log = train(dm, cfg, merged["mode"])
    save_params(out / "params.npz", params)
    save_embedding(out / "embedding.txt", h, dm.labels)
    save_train_log(out / "trainlog.txt", log)
    _write_manifest(out, "train", merged, {"input-rows": dm.n, "input-cols": dm.m})
    if len(log):
        last = log.records[-1]
        print(
            f"{merged['mode']}: iter {last.iteration} "
            f"o_rec {last.o_rec:.6g} o_reg {last.o_reg:.6g} "
            f"o_dp {last.o_dp:.6g} total {last.total:.6g}"
        )
    else:
        print(f"{merged['mode']}: pretraining only (maxiter 0)")
    return 0


def cmd_embed(merged: dict) -> int:
    out = _require_out(merged)
    if not merged["params"]:
        raise ValueError("--params is required")
    params = load_params(merged["params"])
    dm = _load_input(merged)
    h = embed_data(params, dm)
    save_embedding(out / "embedding.txt", h, dm.labels)
    _write_manifest(out, "embed", merged, {"input-rows": dm.n, "input-cols": dm.m})
    print(f"embedded {h.shape[0]} points into {h.shape[1]} dimensions")
    return 0


def cmd_eval(merged: dict) -> int:
    out = _require_out(merged)
    if not merged["embedding"]:
        raise ValueError("--embedding is required")
    h, labels = load_embedding(merged["embedding"], labeled=merged["labeled"])
    if merged["labels"]:
        labels = load_labels(merged["labels"])
    if labels is None:
        raise ValueError("need labels: pass --labels or --labeled")
    metrics = evaluate_clustering(
        h,
        labels,
        n_clusters=merged["k-clusters"],
        restarts=merged["restarts"],
        repeats=merged["repeats"],
        seed=merged["seed"],
    )
    lines = [f"{key}={metrics[key]:.17g}" for key in sorted(metrics)]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out, "eval", merged, {"input-rows": h.shape[0], "input-cols": h.shape[1]})
    for line in lines:
        print(line)
    return 0


def _rel_err(analytic, numeric) -> float:
    scale = 0.0
    diff = 0.0
    for a, f in zip(analytic, numeric):
        scale = max(scale, float(np.abs(a).max(initial=0.0)), float(np.abs(f).max(initial=0.0)))
        diff = max(diff, float(np.abs(a - f).max(initial=0.0)))
    return diff / max(scale, 1e-300)


def _grads_as_list(grads):
    return grads.weights + grads.biases


def _check_param_gradients(seed: int):
    """FD-verify backprop and the weight penalties on tiny networks."""
    rng = np.random.default_rng(seed)
    rows = []
    for sizes, linear in (((2, 2, 1, 2, 2), 2), ((3, 2, 3), None)):
        params = random_params(sizes, rng, linear_layer=linear)
        n = 4
        x = rng.uniform(0.1, 0.9, size=(n, sizes[0]))

        cache = forward(params, x)
        analytic = [g / n for g in _grads_as_list(backprop(params, cache, x))]
        fd = fd_param_gradient(lambda q: reconstruction_loss(forward(q, x), x), params)
        rows.append(("rec", sizes, _rel_err(analytic, _grads_as_list(fd))))

        if linear is None:
            alpha, p = 0.7, 0.2
            with_sp = backprop(params, cache, x, sparsity=(1, p, alpha))
            scaled = [g / n for g in _grads_as_list(with_sp)]
            fd = fd_param_gradient(
                lambda q: reconstruction_loss(forward(q, x), x)
                + alpha * sparsity_penalty(forward(q, x), 1, p),
                params,
            )
            rows.append(("sparsity", sizes, _rel_err(scaled, _grads_as_list(fd))))
        else:
            mid = params.depth // 2
            g = rng.standard_normal(cache.hs[mid].shape)
            with_cot = backprop(params, cache, x, dp_grad_bottleneck=g)
            base = backprop(params, cache, x)
            diff = [a - b for a, b in zip(_grads_as_list(with_cot), _grads_as_list(base))]
            fd = fd_param_gradient(
                lambda q: float((g * forward(q, x).hs[mid]).sum()), params
            )
            rows.append(("bottleneck cotangent", sizes, _rel_err(diff, _grads_as_list(fd))))

        value, grads = nonneg_penalty(params)
        fd = fd_param_gradient(lambda q: nonneg_penalty(q)[0], params)
        rows.append(("nonneg", sizes, _rel_err(_grads_as_list(grads), _grads_as_list(fd))))
    return rows


def _check_dp_descent(seed: int, trials: int, step: float = 1e-4):
    """Count how often a small step against the penalty gradient lowers it."""
    down = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        n = int(rng.integers(5, 11))
        d = int(rng.integers(2, 4))
        x = rng.uniform(0.0, 1.0, size=(n, 8))
        p = high_conditionals(x, 3)
        h = rng.standard_normal((n, d))
        if trial % 2 == 0:
            b = np.ones(n)
        else:
            b, _ = calibrate_bandwidths(pairwise_sq_dists(h), t=min(5.0, n - 2.0))
        q = low_conditionals(h, b)
        g = dp_gradient(p, q, h, b)
        before = dp_objective(p, q)
        after = dp_objective(p, low_conditionals(h - step * g, b))
        down += after < before
    return down


def cmd_gradcheck(merged: dict) -> int:
    lines = []
    ok = True
    for name, sizes, err in _check_param_gradients(merged["seed"]):
        passed = err < 1e-6
        ok &= passed
        lines.append(f"{name} sizes={sizes}: max rel err {err:.3e} [{'pass' if passed else 'FAIL'}]")
    trials = merged["trials"]
    down = _check_dp_descent(merged["seed"], trials)
    need = int(np.ceil(0.95 * trials))
    passed = down >= need
    ok &= passed
    lines.append(
        f"penalty descent: {down}/{trials} trials decreased (need {need}) "
        f"[{'pass' if passed else 'FAIL'}]"
    )
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if merged["out"]:
        out = _require_out(merged)
        (out / "gradcheck.txt").write_text(report, encoding="utf-8")
        _write_manifest(out, "gradcheck", merged)
    return 0 if ok else 2


def cmd_fields(merged: dict) -> int:
    out = _require_out(merged)
    if not merged["params"]:
        raise ValueError("--params is required")
    params = load_params(merged["params"])
    layer = merged["layer"]
    if not 1 <= layer <= params.depth:
        raise ValueError(f"--layer {layer} out of range for depth {params.depth}")
    fan_in = params.weights[layer - 1].shape[1]
    side = merged["side"]
    if side is None:
        side = int(np.sqrt(fan_in))
    count = min(merged["count"], params.weights[layer - 1].shape[0])
    written = save_receptive_fields(params, layer, count, side, out / "fields")
    _write_manifest(out, "fields", merged)
    print(f"wrote {len(written)} receptive fields to {out / 'fields'}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "fields": cmd_fields,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not ns.command:
        parser.print_help()
        return 1
    try:
        merged = _merge(ns.command, ns)
        return _HANDLERS[ns.command](merged)
    except (NonFinite, DegenerateBandwidth) as exc:
        print(f"dpne: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (DpneError, ValueError, OSError) as exc:
        print(f"dpne: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
