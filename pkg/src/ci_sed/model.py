"""Compact CNN backbone and the shared-weight frame classifier.

The backbone maps a log-mel spectrogram ``[mel_bins, n]`` to frame features
``[c, n]``; the classifier is a single fully connected layer applied per frame
followed by a sigmoid and a clip-level aggregator.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CISEDCKP"
CHECKPOINT_VERSION = 1


# per-channel standardization axes of a [B, C, F, n] activation: "frame" keeps
# every frame's statistics local, "clip" pools them over the whole clip
NORM_AXES = {"frame": (1, 2), "clip": (2, 3)}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mel_bins: int = 64
    n_classes: int = 6
    channels: int = 64
    widths: tuple[int, int] = (16, 32)
    pooling: str = "mean"
    norm: str = "frame"
    dtype: str = "float32"

    def __post_init__(self):
        if self.norm not in NORM_AXES:
            raise ValueError(f"norm must be one of {sorted(NORM_AXES)}, got {self.norm!r}")
        if self.mel_bins % 8:
            raise ValueError(f"mel_bins must be divisible by 8 (three 2x pools), got {self.mel_bins}")
        if self.pooling not in ("mean", "linear_softmax"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def block_channels(self) -> tuple[int, int, int]:
        return (*self.widths, self.channels)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Classifier:
    """Fully connected layer ``[k x c]`` shared by both branches."""

    weight: Tensor
    bias: Tensor


@dataclass
class Projection:
    """1x1 convolution mapping k pooled context rows onto c feature channels."""

    weight: Tensor
    bias: Tensor


@dataclass
class Backbone:
    conv_w: list[Tensor]
    conv_b: list[Tensor]


@dataclass
class SEDModel:
    config: ModelConfig
    backbone: Backbone
    classifier: Classifier
    projection: Projection
    extra: dict = field(default_factory=dict)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.backbone.conv_w, self.backbone.conv_b)):
            params[f"backbone.conv{i}.weight"] = w
            params[f"backbone.conv{i}.bias"] = b
        params["classifier.weight"] = self.classifier.weight
        params["classifier.bias"] = self.classifier.bias
        params["projection.weight"] = self.projection.weight
        params["projection.bias"] = self.projection.bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def init_model(config: ModelConfig, seed: int = 0) -> SEDModel:
    """He-normal convolutions, small classifier weights, zero projection."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)

    def param(arr, name):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    conv_w, conv_b = [], []
    cin = 1
    for i, cout in enumerate(config.block_channels):
        std = np.sqrt(2.0 / (cin * 9))
        conv_w.append(param(rng.normal(0.0, std, (cout, cin, 3, 3)), f"backbone.conv{i}.weight"))
        conv_b.append(param(np.zeros(cout), f"backbone.conv{i}.bias"))
        cin = cout
    c, k = config.channels, config.n_classes
    clf = Classifier(
        param(rng.normal(0.0, 1.0 / np.sqrt(c), (k, c)), "classifier.weight"),
        param(np.zeros(k), "classifier.bias"),
    )
    proj = Projection(param(np.zeros((c, k)), "projection.weight"), param(np.zeros(c), "projection.bias"))
    return SEDModel(config, Backbone(conv_w, conv_b), clf, proj)


def backbone_forward(model: SEDModel, spec) -> Tensor:
    """Spectrogram(s) ``[mel, n]`` or ``[B, mel, n]`` -> features ``[(B,) c, n]``.

    Each block is conv3x3 -> per-channel standardization -> relu -> 2x
    average pooling along frequency.  With the default ``norm="frame"`` the
    standardization runs over frequency within each frame, so no clip-wide
    statistic reaches a frame's features.
    """
    x = spec if isinstance(spec, Tensor) else Tensor(spec, dtype=model.config.dtype)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1, *x.shape))
    if x.data.ndim != 3 or x.shape[1] != model.config.mel_bins:
        raise ValueError(f"backbone expects [B, {model.config.mel_bins}, n] input, got {x.shape}")
    B, F, n = x.shape
    h = ad.reshape(x, (B, 1, F, n))
    for w, b in zip(model.backbone.conv_w, model.backbone.conv_b):
        h = ad.conv2d(h, w, b, stride=1, padding=1)
        h = ad.standardize(h, axis=NORM_AXES[model.config.norm])
        h = ad.relu(h)
        C, Fh = h.shape[1], h.shape[2]
        h = ad.mean(ad.reshape(h, (B, C, Fh // 2, 2, n)), axis=3)
    feats = ad.mean(h, axis=2)
    if squeeze:
        feats = ad.reshape(feats, feats.shape[1:])
    return feats


def frame_scores(x: Tensor, clf: Classifier) -> Tensor:
    """Per-frame sigmoid scores ``m[:, t] = sigmoid(W x[:, t] + b)``."""
    if x.shape[-2] != clf.weight.shape[1]:
        raise ValueError(f"frame_scores: features have {x.shape[-2]} channels, classifier expects {clf.weight.shape[1]}")
    return ad.sigmoid(ad.conv1x1(x, clf.weight, clf.bias))


def aggregate_clip(m: Tensor, pooling: str = "mean") -> Tensor:
    """Clip scores from frame scores by pooling over the last (frame) axis."""
    if m.shape[-1] == 0:
        raise ValueError("aggregate_clip: empty frame axis")
    if pooling == "linear_softmax":
        return ad.linear_softmax_pool(m, axis=-1)
    return ad.mean(m, axis=-1)


# checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: SEDModel, tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write named tensors plus a JSON header behind a magic/version prefix.

    Layout: magic(8) | version u32 | header_len u32 | header JSON | payload.
    All integers little-endian; payload arrays are C-order little-endian.
    """
    named = {name: t.data for name, t in model.named_parameters().items()}
    named.update(tensors or {})
    entries, chunks, offset = [], [], 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "fingerprint": model.config.fingerprint(),
        "config": asdict(model.config),
        "tensors": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[SEDModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from ``path``.

    Returns the model, the non-parameter tensors (e.g. ``context_pool.q``) and
    the meta dict.  Refuses to load when ``expected`` has another fingerprint.
    """
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**{**header["config"], "widths": tuple(header["config"]["widths"])})
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint does not match its own config")
    if expected is not None and expected.fingerprint() != header["fingerprint"]:
        raise CheckpointError(
            f"{path}: config fingerprint {header['fingerprint']} != expected {expected.fingerprint()}")
    model = init_model(cfg)
    params = model.named_parameters()
    for name, t in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays.pop(name).astype(t.dtype)
    return model, arrays, header["meta"]
