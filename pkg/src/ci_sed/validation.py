"""Self-checks shipped with the library: gradient suite and backdoor oracle comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .causal import ContextPool, approx_backdoor, exact_backdoor, pool_update
from .model import ModelConfig, SEDModel, aggregate_clip, backbone_forward, frame_scores, init_model


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    return ad.total(ad.mul(out, Tensor(rng.normal(size=out.shape))))


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _case(name: str, rng: np.random.Generator):
    """One random (build, params) instance for operator ``name``, in float64."""
    p, q, r = (int(v) for v in rng.integers(1, 5, size=3))
    if name == "matmul":
        a, b = _param(rng, p, q), _param(rng, q, r)
        return lambda: _probe(ad.matmul(a, b), np.random.default_rng(1)), [a, b]
    if name == "conv1x1":
        x, w, b = _param(rng, 2, p, 5), _param(rng, q, p), _param(rng, q)
        return lambda: _probe(ad.conv1x1(x, w, b), np.random.default_rng(1)), [x, w, b]
    if name == "conv2d":
        stride = tuple(int(v) for v in rng.integers(1, 3, size=2))
        x, w, b = _param(rng, 2, p, 5, 6), _param(rng, q, p, 3, 3), _param(rng, q)
        return lambda: _probe(ad.conv2d(x, w, b, stride, 1), np.random.default_rng(1)), [x, w, b]
    if name == "sigmoid":
        x = _param(rng, p, 4, scale=3.0)
        return lambda: _probe(ad.sigmoid(x), np.random.default_rng(1)), [x]
    if name == "relu":
        x = _param(rng, p, 6)
        return lambda: _probe(ad.relu(x), np.random.default_rng(1)), [x]
    if name == "add":
        a, b = _param(rng, p, 4), _param(rng, 1, 4)
        return lambda: _probe(ad.add(a, b), np.random.default_rng(1)), [a, b]
    if name == "mul":
        a, b = _param(rng, p, 4), _param(rng, p, 4)
        return lambda: _probe(ad.mul(a, b), np.random.default_rng(1)), [a, b]
    if name == "mean":
        x = _param(rng, p, 7)
        return lambda: _probe(ad.mean(x, axis=-1), np.random.default_rng(1)), [x]
    if name == "standardize":
        x = _param(rng, p, 7, scale=2.0)
        return lambda: _probe(ad.standardize(x, axis=-1), np.random.default_rng(1)), [x]
    if name == "bce_loss":
        pred = Tensor(rng.uniform(0.05, 0.95, size=(p, 4)), requires_grad=True)
        target = rng.integers(0, 2, size=(p, 4)).astype(float)
        return lambda: ad.bce_loss(pred, target), [pred]
    raise KeyError(name)


OPERATORS = ("matmul", "conv1x1", "conv2d", "sigmoid", "relu", "add", "mul", "mean", "standardize", "bce_loss")


def operator_gradient_suite(n_instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error over ``n_instances`` random instances per operator."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in OPERATORS:
        worst = 0.0
        for _ in range(n_instances):
            build, params = _case(name, rng)
            worst = max(worst, *check_gradients(build, params))
        out[name] = worst
    return out


def end_to_end_gradient(seed: int = 0, c: int = 8, n: int = 16, k: int = 3) -> dict[str, float]:
    """Relative error of the full ci-variant loss w.r.t. every parameter (float64).

    The pool is held fixed: it is state updated outside the differentiated
    graph.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(mel_bins=8, n_classes=k, channels=c, widths=(2, 4), dtype="float64")
    model = init_model(cfg, seed)
    model.projection.weight.data = rng.normal(0, 0.5, (c, k))
    model.projection.bias.data = rng.normal(0, 0.5, c)
    specs = rng.normal(size=(2, 8, n))
    y = (rng.random((2, k)) < 0.5).astype(float)
    y[:, 0] = 1.0
    pool = pool_update(ContextPool.zeros(k, n), rng.random((k, n)), range(k))

    def build():
        x = backbone_forward(model, Tensor(specs))
        s1 = aggregate_clip(frame_scores(x, model.classifier))
        s2 = approx_backdoor(x, pool, y, model.classifier, model.projection)
        return ad.add(ad.bce_loss(s1, y), ad.bce_loss(s2, y))

    return {name: check_gradients(build, [p])[0] for name, p in model.named_parameters().items()}


def random_frozen_model(k: int, mel_bins: int, n: int, seed: int = 0, channels: int = 16,
                        widths=(4, 8)) -> tuple[SEDModel, ContextPool]:
    """A random network with non-trivial projection and a populated pool."""
    rng = np.random.default_rng(seed)
    model = init_model(ModelConfig(mel_bins=mel_bins, n_classes=k, channels=channels, widths=widths,
                                   dtype="float64"), seed)
    model.projection.weight.data = rng.normal(0, 0.5, (channels, k))
    model.projection.bias.data = rng.normal(0, 0.1, channels)
    pool = ContextPool.zeros(k, n)
    for _ in range(5):
        pool = pool_update(pool, rng.random((k, n)), range(k))
    return model, pool


@dataclass
class BackdoorReport:
    exact: np.ndarray
    approx: np.ndarray
    abs_dev: np.ndarray       # [N] mean |exact - approx| per clip
    max_dev: np.ndarray       # [N]
    spearman: np.ndarray      # [N] class-ranking agreement, nan when undefined
    t_exact: float
    t_approx: float

    @property
    def runtime_ratio(self) -> float:
        return self.t_exact / self.t_approx

    def summary(self) -> dict[str, float]:
        return {
            "clips": float(len(self.abs_dev)),
            "k": float(self.exact.shape[1]),
            "mean_abs_dev": float(self.abs_dev.mean()),
            "max_abs_dev": float(self.max_dev.max()),
            "median_spearman": float(np.nanmedian(self.spearman)) if np.any(np.isfinite(self.spearman)) else float("nan"),
            "exact_seconds": self.t_exact,
            "approx_seconds": self.t_approx,
            "runtime_ratio": self.runtime_ratio,
        }


def _ranking_agreement(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(spearmanr(a, b).statistic)


def backdoor_report(model: SEDModel, pool: ContextPool, specs: np.ndarray, mask: str = "ones",
                    repeats: int = 3) -> BackdoorReport:
    """Compare the k-pass stratified oracle with the single-pass approximation.

    Features are computed once; timing covers only the intervention head
    (enhance, classify, aggregate), which is where the two paths differ, and
    takes the best of ``repeats`` runs.  ``mask="ones"`` weights all strata
    equally; ``mask="scores"`` uses branch-one clip scores as at inference.
    """
    cfg = model.config
    x = backbone_forward(model, Tensor(specs, dtype=cfg.dtype))
    k = cfg.n_classes
    if mask == "scores":
        m = aggregate_clip(frame_scores(x, model.classifier), cfg.pooling).data
    else:
        m = np.ones((len(specs), k))

    t_exact = t_approx = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        exact = exact_backdoor(x, pool, model.classifier, model.projection, m, cfg.pooling)
        t_exact = min(t_exact, time.perf_counter() - t0)
        t0 = time.perf_counter()
        approx = np.asarray(approx_backdoor(x, pool, m, model.classifier, model.projection, cfg.pooling).data,
                            dtype=np.float64)
        t_approx = min(t_approx, time.perf_counter() - t0)
    diff = np.abs(exact - approx)
    rho = np.array([_ranking_agreement(e, a) for e, a in zip(exact, approx)])
    return BackdoorReport(exact, approx, diff.mean(axis=1), diff.max(axis=1), rho, t_exact, t_approx)
