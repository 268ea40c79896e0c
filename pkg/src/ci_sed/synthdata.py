"""Synthetic confounded soundscapes with known strong labels.

Each clip is generated by a small structural model:

* a context draw picks a seed class and adds co-occurring classes with
  probability ``rho[seed][b]`` (event co-occurrence confounding);
* the background texture is chosen from the clip's classes: a class with
  association strength ``beta`` pulls in its preferred texture with that
  probability (background entanglement);
* every labelled class contributes one event, a class-specific
  time-frequency patch at a uniform random onset.

Backgrounds and events are mixed in the power domain and stored as log-mel
``[mel_bins, n]`` float32 tensors.  Strong labels record the exact placement.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"CSTN"
TENSOR_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4")}

SPLITS = ("train", "eval_confounded", "eval_decorrelated")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}


def default_rho(k: int, pair: tuple[int, int] = (0, 1), strength: float = 0.9, base: float = 0.1) -> np.ndarray:
    rho = np.full((k, k), base)
    a, b = pair
    if max(a, b) < k:
        rho[a, b] = rho[b, a] = strength
    np.fill_diagonal(rho, 0.0)
    return rho


@dataclass
class GeneratorConfig:
    k: int = 6
    n: int = 240
    mel_bins: int = 64
    rho: np.ndarray = None
    # per class: preferred background texture id (-1 = none) and pull strength
    bg_texture: tuple[int, ...] = None
    bg_strength: tuple[float, ...] = None
    n_textures: int = 4
    events_per_clip: tuple[int, int] = (1, 3)
    duration_frac: tuple[float, float] = (0.1, 0.3)
    event_gain_db: tuple[float, float] = (4.0, 10.0)
    seed: int = 0
    confounded_pair: tuple[int, int] = (0, 1)
    entangled_class: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"need at least one class, got {self.k}")
        if self.rho is None:
            self.rho = default_rho(self.k, self.confounded_pair)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.rho.shape != (self.k, self.k):
            raise ValueError(f"rho must be {self.k}x{self.k}, got {self.rho.shape}")
        off = self.rho[~np.eye(self.k, dtype=bool)]
        if np.any(off < 0) or np.any(off > 1):
            raise ValueError("rho entries must lie in [0, 1]")
        if not np.allclose(self.rho, self.rho.T):
            raise ValueError("rho must be symmetric")
        if self.bg_texture is None:
            tex = [-1] * self.k
            if 0 <= self.entangled_class < self.k:
                tex[self.entangled_class] = 0
            self.bg_texture = tuple(tex)
        if self.bg_strength is None:
            self.bg_strength = tuple(0.9 if t >= 0 else 0.0 for t in self.bg_texture)
        self.bg_texture = tuple(int(t) for t in self.bg_texture)
        self.bg_strength = tuple(float(s) for s in self.bg_strength)
        if len(self.bg_texture) != self.k or len(self.bg_strength) != self.k:
            raise ValueError("background association needs one entry per class")
        if any(not 0 <= s <= 1 for s in self.bg_strength):
            raise ValueError("background strengths must lie in [0, 1]")
        if any(t >= self.n_textures for t in self.bg_texture):
            raise ValueError(f"texture ids must be < n_textures={self.n_textures}")
        lo, hi = self.events_per_clip
        if not 1 <= lo <= hi or lo > self.k:
            raise ValueError(f"invalid events_per_clip {self.events_per_clip} for {self.k} classes")
        self.events_per_clip = (int(lo), int(hi))
        self.duration_frac = tuple(float(v) for v in self.duration_frac)
        self.event_gain_db = tuple(float(v) for v in self.event_gain_db)
        self.confounded_pair = tuple(int(v) for v in self.confounded_pair)

    def decorrelated(self) -> "GeneratorConfig":
        """Same classes and renderer, no co-occurrence and no background pull."""
        return replace(self, rho=np.zeros((self.k, self.k)), bg_strength=(0.0,) * self.k)

    def to_json(self) -> dict:
        d = asdict(self)
        d["rho"] = self.rho.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("bg_texture", "bg_strength", "events_per_clip", "duration_frac",
                    "event_gain_db", "confounded_pair"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SynthClip:
    spec: np.ndarray
    weak: list[int]
    strong: list[tuple[int, int, int]] = field(default_factory=list)
    background: int = -1


def sample_labels(cfg: GeneratorConfig, rng: np.random.Generator) -> list[int]:
    """Seed class first, then co-occurring classes in increasing order.

    Each other class b joins with probability ``rho[seed][b]``; extras beyond
    the per-clip maximum are dropped at random.
    """
    k = cfg.k
    seed_cls = int(rng.integers(k))
    draws = rng.random(k)
    extras = [b for b in range(k) if b != seed_cls and draws[b] < cfg.rho[seed_cls, b]]
    lo, hi = cfg.events_per_clip
    if len(extras) > hi - 1:
        keep = rng.choice(len(extras), size=hi - 1, replace=False)
        extras = [extras[i] for i in sorted(keep)]
    while len(extras) + 1 < lo:
        pool = [b for b in range(k) if b != seed_cls and b not in extras]
        extras.append(int(rng.choice(pool)))
        extras.sort()
    return [seed_cls, *extras]


def class_patterns(k: int, mel_bins: int) -> np.ndarray:
    """Unit-peak spectral templates ``[k, mel_bins]``.

    The first half of the classes are harmonic stacks with distinct spacing,
    the rest flat bands at distinct positions.
    """
    f = np.arange(mel_bins)
    scale = mel_bins / 64.0
    pats = np.zeros((k, mel_bins))
    n_harm = (k + 1) // 2
    for j in range(k):
        if j < n_harm:
            base = (5 + 3 * j) * scale
            peaks = base * np.arange(1, 6)
            peaks = peaks[peaks < mel_bins - 1]
            for h, p in enumerate(peaks):
                pats[j] += 0.85 ** h * np.exp(-0.5 * ((f - p) / (0.8 * scale)) ** 2)
        else:
            slot = j - n_harm
            n_band = k - n_harm
            width = (mel_bins * 0.55) / n_band
            lo = mel_bins * 0.4 + slot * width
            pats[j] = 1.0 / (1.0 + np.exp(-(f - lo) / scale)) / (1.0 + np.exp((f - lo - 0.7 * width) / scale))
    return pats / pats.max(axis=1, keepdims=True)


def texture_envelopes(n_textures: int, mel_bins: int) -> np.ndarray:
    """Band-limited noise envelopes with texture-specific spectral tilt."""
    f = np.arange(mel_bins) / max(mel_bins - 1, 1)
    env = np.zeros((n_textures, mel_bins))
    for t in range(n_textures):
        tilt = np.linspace(-3.0, 3.0, n_textures)[t] if n_textures > 1 else 0.0
        centre = (t + 0.5) / n_textures
        band = np.exp(-0.5 * ((f - centre) / 0.22) ** 2)
        env[t] = np.exp(tilt * (f - 0.5)) * (0.3 + band)
    return env / env.max(axis=1, keepdims=True)


def choose_texture(labels, cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    """Preferred texture of a labelled class with its pull strength, else a free one.

    Free textures are those no class prefers with nonzero strength; when all
    are claimed (or none is), every texture is free.
    """
    for j in labels:
        if cfg.bg_texture[j] >= 0 and rng.random() < cfg.bg_strength[j]:
            return cfg.bg_texture[j]
    claimed = {t for t, s in zip(cfg.bg_texture, cfg.bg_strength) if t >= 0 and s > 0}
    free = [t for t in range(cfg.n_textures) if t not in claimed] or list(range(cfg.n_textures))
    return int(free[rng.integers(len(free))])


def render_clip(labels, cfg: GeneratorConfig, rng: np.random.Generator) -> SynthClip:
    """Render one log-mel clip with a single event per label."""
    labels = [int(j) for j in labels]
    if not labels:
        raise ValueError("render_clip needs at least one label")
    n, F = cfg.n, cfg.mel_bins
    texture = choose_texture(labels, cfg, rng)
    env = texture_envelopes(cfg.n_textures, F)[texture]
    noise = rng.gamma(4.0, 0.25, size=(F, n))
    power = 0.5 * env[:, None] * noise + 0.02 * rng.gamma(4.0, 0.25, size=(F, n))

    pats = class_patterns(cfg.k, F)
    strong = []
    for j in labels:
        dur = int(round(rng.uniform(*cfg.duration_frac) * n))
        dur = max(dur, 1)
        if dur > n:
            raise ValueError(f"event of {dur} frames does not fit a {n}-frame clip")
        onset = int(rng.integers(0, n - dur + 1))
        gain = 10.0 ** (rng.uniform(*cfg.event_gain_db) / 10.0)
        ramp = np.minimum(1.0, np.minimum(np.arange(1, dur + 1), np.arange(dur, 0, -1)) / 2.0)
        jitter = rng.gamma(8.0, 1.0 / 8.0, size=(F, dur))
        power[:, onset:onset + dur] += gain * pats[j][:, None] * ramp[None, :] * jitter
        strong.append((j, onset, onset + dur))
    spec = np.log(power).astype(np.float32)
    return SynthClip(spec, sorted(set(labels)), sorted(strong), texture)


def clip_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_IDS[split], index])


def generate_clip(cfg: GeneratorConfig, split: str, index: int) -> SynthClip:
    rng = clip_rng(cfg.seed, split, index)
    return render_clip(sample_labels(cfg, rng), cfg, rng)


# tensor files -----------------------------------------------------------------

def write_tensor(path, arr: np.ndarray) -> None:
    """magic(4) | version u16 | dtype code u8 | ndim u8 | extents u32[ndim] | payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<HBB", TENSOR_VERSION, 1, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad tensor magic {blob[:4]!r}")
    version, code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != TENSOR_VERSION or code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unsupported tensor version {version} / dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", blob[8:8 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    payload = blob[8 + 4 * ndim:]
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


# datasets -------------------------------------------------------------------

def worker_count() -> int:
    """Process count: ``CI_SED_THREADS`` if set, capped by the CPU count."""
    env = os.environ.get("CI_SED_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, os.cpu_count() or 1))


def _render_split(args):
    cfg_json, split, start, stop, out_dir = args
    cfg = GeneratorConfig.from_json(cfg_json)
    records = []
    for i in range(start, stop):
        clip = generate_clip(cfg, split, i)
        rel = f"{split}/{i:06d}.tns"
        write_tensor(Path(out_dir) / rel, clip.spec)
        rec = {"path": rel, "split": split, "weak": clip.weak}
        if split != "train":
            rec["strong"] = [list(s) for s in clip.strong]
            rec["background"] = clip.background
        records.append(rec)
    return records


def emit_dataset(cfg: GeneratorConfig, n_train: int, n_eval_confounded: int, n_eval_decorrelated: int,
                 out_dir, workers: int | None = None) -> list[dict]:
    """Write the three splits, ``manifest.jsonl`` and ``dataset.json`` under ``out_dir``.

    Train records carry weak labels only.  Clip ``i`` of a split always gets
    the same sub-seed, so output bytes do not depend on ``workers``.
    """
    out_dir = Path(out_dir)
    plan = [("train", cfg, n_train), ("eval_confounded", cfg, n_eval_confounded),
            ("eval_decorrelated", cfg.decorrelated(), n_eval_decorrelated)]
    try:
        for split, _, _ in plan:
            (out_dir / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out_dir}: {exc}") from exc

    workers = workers or worker_count()
    jobs = []
    for split, scfg, count in plan:
        step = max(1, -(-count // (4 * workers)))
        for start in range(0, count, step):
            jobs.append((scfg.to_json(), split, start, min(count, start + step), str(out_dir)))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                chunks = list(ex.map(_render_split, jobs))
        else:
            chunks = [_render_split(j) for j in jobs]
    except OSError as exc:
        raise OSError(f"failed writing clips under {out_dir}: {exc}") from exc
    records = [r for chunk in chunks for r in chunk]

    with open(out_dir / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"generator": cfg.to_json(),
            "splits": {split: count for split, _, count in plan}}
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    return records


def read_manifest(data_dir) -> list[dict]:
    with open(Path(data_dir) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_dataset_meta(data_dir) -> dict:
    with open(Path(data_dir) / "dataset.json") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class WeakClip:
    """A training clip: spectrogram and clip-level label set, nothing else."""

    spec: np.ndarray
    weak: tuple[int, ...]


@dataclass(frozen=True)
class StrongClip:
    spec: np.ndarray
    weak: tuple[int, ...]
    strong: tuple[tuple[int, int, int], ...]


def load_weak_split(data_dir, split: str = "train") -> list[WeakClip]:
    """Read a split keeping only the tensor path and weak labels of each record."""
    data_dir = Path(data_dir)
    clips = []
    for rec in read_manifest(data_dir):
        if rec["split"] != split:
            continue
        clips.append(WeakClip(read_tensor(data_dir / rec["path"]), tuple(int(j) for j in rec["weak"])))
    return clips


def load_strong_split(data_dir, split: str) -> list[StrongClip]:
    data_dir = Path(data_dir)
    clips = []
    for rec in read_manifest(data_dir):
        if rec["split"] != split:
            continue
        if "strong" not in rec:
            raise ValueError(f"split {split!r} has no strong labels (record {rec['path']})")
        clips.append(StrongClip(read_tensor(data_dir / rec["path"]),
                                tuple(int(j) for j in rec["weak"]),
                                tuple(tuple(int(v) for v in s) for s in rec["strong"])))
    return clips
