"""Dual-branch training for the baseline and context-intervention variants.

Both variants share one backbone, one classifier and the same data order for
a given seed.  The ``ci`` variant adds a second branch on enhanced features::

    loss = bce(S, s*) + bce(S_e, s*)

while ``baseline`` uses ``2 * bce(S, s*)`` so both losses live on one scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .causal import DEFAULT_LAMBDA, POOL_EPS, ContextPool, approx_backdoor, pool_update
from .metrics import EvalResult, MetricsConfig, append_metrics_csv, evaluate_predictions, read_metrics_csv
from .model import ModelConfig, SEDModel, aggregate_clip, backbone_forward, frame_scores, init_model, \
    load_checkpoint, save_checkpoint
from .synthdata import StrongClip, WeakClip, load_strong_split, load_weak_split, read_dataset_meta, worker_count

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "ci")
EVAL_SPLITS = ("eval_confounded", "eval_decorrelated")


@dataclass
class TrainConfig:
    variant: str = "ci"
    lam: float = DEFAULT_LAMBDA
    lr: float = 3e-3
    epochs: int = 8
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pool_eps: float = POOL_EPS
    channels: int = 16
    widths: tuple[int, int] = (4, 8)
    pooling: str = "mean"
    norm: str = "frame"
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        self.widths = tuple(int(w) for w in self.widths)

    def model_config(self, n_classes: int, mel_bins: int) -> ModelConfig:
        return ModelConfig(mel_bins=mel_bins, n_classes=n_classes, channels=self.channels,
                           widths=self.widths, pooling=self.pooling, norm=self.norm, dtype=self.dtype)

    def fingerprint(self, exclude: Sequence[str] = ()) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


class Optimizer:
    """Adam (bias-corrected) or plain SGD over a fixed, named parameter set."""

    def __init__(self, named: dict[str, Tensor], cfg: TrainConfig):
        self.named = named
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in named.items()}
        self.v = {k: np.zeros(p.shape) for k, p in named.items()}

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        cfg = self.cfg
        for name, p in self.named.items():
            if p.grad is None:
                continue
            g = p.grad
            if cfg.optimizer == "sgd":
                update = cfg.lr * g
            else:
                self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
                self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
                mhat = self.m[name] / (1 - cfg.beta1 ** self.t)
                vhat = self.v[name] / (1 - cfg.beta2 ** self.t)
                update = cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            p.data = (p.data - update).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for k in self.named:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["optim.t"][0])
        for k in self.named:
            self.m[k] = arrays[f"optim.m.{k}"].astype(np.float64)
            self.v[k] = arrays[f"optim.v.{k}"].astype(np.float64)


def labels_to_matrix(weak: Sequence[Sequence[int]], k: int) -> np.ndarray:
    y = np.zeros((len(weak), k))
    for i, labels in enumerate(weak):
        y[i, list(labels)] = 1.0
    return y


@dataclass
class StepResult:
    loss: float
    branch1: float
    branch2: float
    pool: ContextPool | None
    clip_scores: np.ndarray = field(repr=False)
    enhanced_scores: np.ndarray = field(repr=False)


def forward_train(model: SEDModel, specs: np.ndarray, y: np.ndarray, pool: ContextPool | None, variant: str):
    """Build the training graph on the active tape.

    Returns (loss, bce1, bce2, S, S_e, pool).  In the ``ci`` variant the pool
    is updated clip by clip with branch-one frame predictions before the
    enhanced branch reads it.
    """
    cfg = model.config
    x = backbone_forward(model, Tensor(specs, dtype=cfg.dtype))
    m1 = frame_scores(x, model.classifier)
    s1 = aggregate_clip(m1, cfg.pooling)
    l1 = ad.bce_loss(s1, y)
    if variant == "baseline":
        return ad.add(l1, l1), l1, l1, s1, s1, pool
    for i in range(len(y)):
        pool = pool_update(pool, m1.data[i], np.flatnonzero(y[i]))
    s2 = approx_backdoor(x, pool, y, model.classifier, model.projection, cfg.pooling)
    l2 = ad.bce_loss(s2, y)
    return ad.add(l1, l2), l1, l2, s1, s2, pool


def train_step(model: SEDModel, pool: ContextPool | None, specs: np.ndarray, y: np.ndarray,
               cfg: TrainConfig, optimizer: Optimizer, batch_id=None) -> StepResult:
    if len(specs) == 0:
        raise ValueError("train_step needs a non-empty batch")
    optimizer.zero_grad()
    with Tape() as tape:
        loss, l1, l2, s1, s2, pool = forward_train(model, specs, y, pool, cfg.variant)
        if not np.isfinite(loss.data):
            norms = {k: float(np.linalg.norm(p.data)) for k, p in model.named_parameters().items()}
            raise FloatingPointError(f"non-finite loss {float(loss.data)} at batch {batch_id}; "
                                     f"parameter norms {norms}")
        tape.backward(loss)
    optimizer.step()
    return StepResult(float(loss.data), float(l1.data), float(l2.data), pool, s1.data, s2.data)


def predict(model: SEDModel, pool: ContextPool | None, specs: np.ndarray, variant: str,
            batch_size: int = 64) -> dict[str, np.ndarray]:
    """Inference outputs for both branches; no tape, pool read-only.

    The ``ci`` variant enhances with the branch-one clip scores as soft mask.
    """
    cfg = model.config
    out = {"s1": [], "m1": [], "s2": [], "m2": []}
    for start in range(0, len(specs), batch_size):
        x = backbone_forward(model, Tensor(specs[start:start + batch_size], dtype=cfg.dtype))
        m1 = frame_scores(x, model.classifier)
        s1 = aggregate_clip(m1, cfg.pooling)
        if variant == "ci":
            s2, m2 = approx_backdoor(x, pool, s1.data, model.classifier, model.projection,
                                     cfg.pooling, return_frames=True)
        else:
            s2, m2 = s1, m1
        for key, t in (("s1", s1), ("m1", m1), ("s2", s2), ("m2", m2)):
            out[key].append(np.asarray(t.data))
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate(model: SEDModel, pool: ContextPool | None, clips: Sequence[StrongClip], variant: str,
             metrics_cfg: MetricsConfig = MetricsConfig()) -> EvalResult:
    specs = np.stack([c.spec for c in clips])
    pred = predict(model, pool, specs, variant)
    weak = labels_to_matrix([c.weak for c in clips], model.config.n_classes)
    return evaluate_predictions(pred["s2"], pred["m2"], weak, [c.strong for c in clips], metrics_cfg)


# full training ----------------------------------------------------------------

def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _ckpt_tensors(pool: ContextPool | None, optimizer: Optimizer) -> dict[str, np.ndarray]:
    tensors = dict(optimizer.state())
    if pool is not None:
        tensors["context_pool.q"] = pool.q
        tensors["context_pool.touches"] = pool.touches
    return tensors


def train_model(cfg: TrainConfig, train: Sequence[WeakClip], k: int, ckpt_dir=None,
                log=None) -> tuple[SEDModel, ContextPool | None, list[float]]:
    """Train one (variant, seed) from scratch or resume from ``<ckpt_dir>/<tag>.last.ckpt``."""
    specs = np.stack([c.spec for c in train])
    y_all = labels_to_matrix([c.weak for c in train], k)
    mel_bins, n = specs.shape[1], specs.shape[2]
    mcfg = cfg.model_config(k, mel_bins)
    model = init_model(mcfg, cfg.seed)
    pool = ContextPool.zeros(k, n, cfg.lam, cfg.pool_eps) if cfg.variant == "ci" else None
    optimizer = Optimizer(model.named_parameters(), cfg)
    start_epoch, losses = 0, []

    tag = f"{cfg.variant}_seed{cfg.seed}"
    last = Path(ckpt_dir) / f"{tag}.last.ckpt" if ckpt_dir else None
    if last is not None and last.exists():
        loaded, arrays, meta = load_checkpoint(last, mcfg)
        for name, p in model.named_parameters().items():
            p.data = loaded.named_parameters()[name].data
        optimizer.load_state(arrays)
        if pool is not None:
            pool = ContextPool(arrays["context_pool.q"], cfg.lam, cfg.pool_eps, arrays["context_pool.touches"])
        start_epoch, losses = meta["epoch"], list(meta["losses"])
        logger.info("%s: resuming after epoch %d", tag, start_epoch)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(cfg.seed, epoch, len(specs))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            res = train_step(model, pool, specs[idx], y_all[idx], cfg, optimizer, batch_id=(epoch, b))
            pool = res.pool
            total += res.loss * len(idx)
        losses.append(total / len(order))
        msg = f"{tag} epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.5f} ({time.perf_counter() - t0:.1f}s)"
        logger.info(msg)
        if log is not None:
            log(msg)
        if last is not None:
            save_checkpoint(last, model, _ckpt_tensors(pool, optimizer),
                            {"variant": cfg.variant, "seed": cfg.seed, "epoch": epoch + 1, "losses": losses,
                             "train_fingerprint": cfg.fingerprint()})
    return model, pool, losses


METRIC_ORDER = ("at_f1", "at_map", "sed_map", "seg_f1", "event_f1")


def result_rows(res: EvalResult, variant: str, split: str, seed: int) -> list[dict]:
    d = res.as_dict()
    names = [m for m in METRIC_ORDER if m in d] + [m for m in d if m not in METRIC_ORDER]
    return [{"model": variant, "split": split, "metric": m, "value": d[m], "seed": seed} for m in names]


def checkpoint_path(run_dir, variant: str, seed: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"{variant}_seed{seed}.ckpt"


def load_trained(run_dir, variant: str, seed: int, expected: ModelConfig | None = None):
    path = checkpoint_path(run_dir, variant, seed)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint for variant {variant!r} seed {seed} at {path}")
    model, arrays, meta = load_checkpoint(path, expected)
    pool = None
    if "context_pool.q" in arrays:
        pool = ContextPool(arrays["context_pool.q"], meta.get("lam", DEFAULT_LAMBDA),
                           meta.get("pool_eps", POOL_EPS), arrays["context_pool.touches"])
    return model, pool, meta


def evaluate_run(run_dir, data_dir, variant: str, seed: int, metrics_cfg: MetricsConfig = MetricsConfig(),
                 expected: ModelConfig | None = None, splits: Sequence[str] = EVAL_SPLITS,
                 cache: dict | None = None) -> list[dict]:
    model, pool, _ = load_trained(run_dir, variant, seed, expected)
    rows = []
    for split in splits:
        if cache is not None and split in cache:
            clips = cache[split]
        else:
            clips = load_strong_split(data_dir, split)
            if cache is not None:
                cache[split] = clips
        rows += result_rows(evaluate(model, pool, clips, variant, metrics_cfg), variant, split, seed)
    return rows


def _train_pair(cfg: TrainConfig, data_dir, run_dir, k: int, train: Sequence[WeakClip] | None = None,
                blas_threads: int | None = None) -> None:
    """Train one (variant, seed) and write its final checkpoint."""
    run_dir = Path(run_dir)
    log_path = run_dir / "log"

    def log(msg):
        with open(log_path, "a") as fh:
            fh.write(msg + "\n")

    t0 = time.perf_counter()
    with threadpool_limits(blas_threads):
        if train is None:
            train = load_weak_split(data_dir, "train")
        model, pool, losses = train_model(cfg, train, k, run_dir / "checkpoints", log)
        save_checkpoint(checkpoint_path(run_dir, cfg.variant, cfg.seed), model,
                        {} if pool is None else {"context_pool.q": pool.q, "context_pool.touches": pool.touches},
                        {"variant": cfg.variant, "seed": cfg.seed, "epoch": cfg.epochs, "losses": losses,
                         "lam": cfg.lam, "pool_eps": cfg.pool_eps, "train_fingerprint": cfg.fingerprint()})
    log(f"{cfg.variant} seed {cfg.seed}: trained in {time.perf_counter() - t0:.1f}s")


def run_experiment(cfg: TrainConfig, data_dir, seeds: Sequence[int], run_dir,
                   variants: Sequence[str] = VARIANTS, metrics_cfg: MetricsConfig = MetricsConfig(),
                   workers: int | None = None) -> Path:
    """Train and evaluate every (variant, seed); append rows to ``run_dir/metrics.csv``.

    Pairs whose rows are already present are skipped, so reruns are no-ops and
    interrupted runs resume from the last per-epoch checkpoint.  Independent
    pairs train in up to ``workers`` processes (default ``CI_SED_THREADS``);
    evaluation and CSV writes happen afterwards in a fixed order, so the CSV
    does not depend on the worker count.
    """
    data_dir, run_dir = Path(data_dir), Path(run_dir)
    if not (data_dir / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no dataset manifest under {data_dir}")
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "metrics.csv"

    done = set()
    if csv_path.exists():
        done = {(r["model"], r["seed"]) for r in read_metrics_csv(csv_path)}
    meta = read_dataset_meta(data_dir)
    k, mel_bins = meta["generator"]["k"], meta["generator"]["mel_bins"]
    pending = [replace(cfg, variant=v, seed=s) for v in variants for s in seeds if (v, s) not in done]
    with open(run_dir / "log", "a") as fh:
        for v, s in sorted(done):
            fh.write(f"{v} seed {s}: metrics present, skipping\n")
    to_train = [c for c in pending if not checkpoint_path(run_dir, c.variant, c.seed).exists()]

    workers = min(workers or worker_count(), max(1, len(to_train)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_train_pair, c, data_dir, run_dir, k, None, 1) for c in to_train]
            for f in futures:
                f.result()
    elif to_train:
        train = load_weak_split(data_dir, "train")
        for c in to_train:
            _train_pair(c, data_dir, run_dir, k, train)

    eval_cache: dict = {}
    for c in pending:
        t0 = time.perf_counter()
        rows = evaluate_run(run_dir, data_dir, c.variant, c.seed, metrics_cfg,
                            c.model_config(k, mel_bins), cache=eval_cache)
        append_metrics_csv(csv_path, rows)
        with open(run_dir / "log", "a") as fh:
            fh.write(f"{c.variant} seed {c.seed}: evaluated in {time.perf_counter() - t0:.1f}s\n")
    return csv_path
