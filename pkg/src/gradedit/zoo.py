"""Desk-scale model zoo: synthetic data, small classifiers, training, gradients, checkpoints."""

import copy
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractError,
    ParseError,
    TrainingDivergedError,
)

ARCHITECTURES = ("small_cnn_a", "small_cnn_b", "small_mlp", "tiny_attention")
CHECKPOINT_FORMAT = "gradedit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ImageBatch:
    """Images in [0, 1] shaped (N, C, H, W) with one integer label per image."""

    data: torch.Tensor
    labels: torch.Tensor
    num_classes: int | None = None

    def __post_init__(self):
        self.data = torch.as_tensor(self.data, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        if self.data.dim() != 4:
            raise ContractError(f"image data must be rank 4 (N, C, H, W), got shape {tuple(self.data.shape)}")
        if self.labels.numel() != self.data.shape[0]:
            raise ContractError(f"{self.labels.numel()} labels for {self.data.shape[0]} images")
        if not torch.isfinite(self.data).all():
            raise ContractError("image data contains non-finite values")
        if self.data.numel() and (self.data.min() < 0 or self.data.max() > 1):
            raise ContractError("image data must lie in [0, 1]")
        if self.labels.numel() and self.labels.min() < 0:
            raise ContractError("labels must be nonnegative")
        if self.num_classes is not None and self.labels.numel() and self.labels.max() >= self.num_classes:
            raise ContractError(f"label {int(self.labels.max())} out of range for {self.num_classes} classes")

    def __len__(self):
        return self.data.shape[0]

    def subset(self, index):
        return ImageBatch(self.data[index], self.labels[index], self.num_classes)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class SyntheticDatasetConfig:
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: tuple = (3, 32, 32)
    seed: int = 1
    test_per_class: int | None = None
    noise_std: float = 0.04

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ConfigError(f"image_size must be (C, H, W) with positive entries, got {self.image_size}")
        if self.image_size[0] not in (1, 3):
            raise ConfigError("image_size channels must be 1 or 3")
        if self.image_size[1] < 8 or self.image_size[2] < 8:
            raise ConfigError("image_size H and W must be >= 8")
        if self.test_per_class is not None and self.test_per_class < 0:
            raise ConfigError("test_per_class must be >= 0")

    @property
    def resolved_test_per_class(self):
        if self.test_per_class is not None:
            return self.test_per_class
        return max(1, self.samples_per_class // 4)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "cross", "ring")


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return (dy**2 + dx**2) <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    if kind == "cross":
        w = 0.35 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    d2 = dy**2 + dx**2
    return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)


def _render(cls, n_textures, rng, channels, height, width, noise_std):
    shape = _SHAPES[cls % len(_SHAPES)]
    angle = math.pi * ((cls // len(_SHAPES)) % n_textures) / n_textures
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = min(height, width)
    r = scale * rng.uniform(0.28, 0.38)
    cy = height / 2 + rng.uniform(-0.12, 0.12) * height
    cx = width / 2 + rng.uniform(-0.12, 0.12) * width
    mask = _shape_mask(shape, yy, xx, cy, cx, r)

    period = scale / 4.0
    phase = rng.uniform(0, 2 * math.pi)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    stripes = 0.5 + 0.5 * np.sign(np.sin(2 * math.pi * proj / period + phase))

    fg = rng.uniform(0.55, 1.0, size=channels)
    bg = rng.uniform(0.0, 0.35, size=channels)
    img = np.empty((channels, height, width))
    for c in range(channels):
        textured = fg[c] * (0.6 + 0.4 * stripes)
        img[c] = np.where(mask, textured, bg[c])
    img += rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_split(cfg, per_class, seed_seq):
    channels, height, width = cfg.image_size
    n_textures = max(1, math.ceil(cfg.num_classes / len(_SHAPES)))
    rng = np.random.default_rng(seed_seq)
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    rng.shuffle(labels)
    images = np.stack([_render(int(c), n_textures, rng, channels, height, width, cfg.noise_std) for c in labels]) \
        if len(labels) else np.zeros((0, channels, height, width), np.float32)
    return ImageBatch(torch.from_numpy(images), torch.from_numpy(labels), cfg.num_classes)


def make_synthetic_dataset(cfg):
    """Render procedural shape/stripe images; the class fixes shape and stripe angle.

    Returns ``(train, test)`` drawn from independent RNG streams of ``cfg.seed``.
    """
    if not isinstance(cfg, SyntheticDatasetConfig):
        raise ConfigError("expected a SyntheticDatasetConfig")
    train_seq, test_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    train = _render_split(cfg, cfg.samples_per_class, train_seq)
    test = _render_split(cfg, cfg.resolved_test_per_class, test_seq)
    return train, test


def load_image_folder(root, image_size=(3, 32, 32)):
    """Load ``root/<class_name>/*.png|jpg`` into an ImageBatch (classes sorted by name)."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ConfigError(f"{root} needs at least two class subdirectories")
    channels, height, width = image_size
    mode = "RGB" if channels == 3 else "L"
    images, labels = [], []
    for idx, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = Image.open(path).convert(mode).resize((width, height), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr.reshape(height, width, channels).transpose(2, 0, 1))
            labels.append(idx)
    return ImageBatch(torch.from_numpy(np.stack(images)), torch.tensor(labels), len(classes))


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------


class Classifier(nn.Module):
    """A classifier made of named sequential stages; every stage output is a probe-able layer."""

    def __init__(self, arch_id, num_classes, input_shape, stages, seed=0):
        super().__init__()
        self.arch_id = arch_id
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.stages = nn.ModuleDict(stages)

    @property
    def layer_names(self):
        return list(self.stages.keys())

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        for stage in self.stages.values():
            x = stage(x)
        return x

    def forward_with_features(self, x, layer_id):
        """Return ``(features at layer_id, logits)``."""
        if layer_id not in self.stages:
            raise ConfigError(f"unknown layer {layer_id!r}; available: {self.layer_names}")
        feat = None
        for name, stage in self.stages.items():
            x = stage(x)
            if name == layer_id:
                feat = x
        return feat, x

    def forward_from(self, feat, layer_id):
        """Continue the forward pass from the output of ``layer_id``."""
        names = self.layer_names
        x = feat
        for name in names[names.index(layer_id) + 1:]:
            x = self.stages[name](x)
        return x


class _Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


class _PatchEmbed(nn.Module):
    def __init__(self, channels, dim, patch, num_tokens):
        super().__init__()
        self.proj = nn.Conv2d(channels, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, num_tokens, dim))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2) + self.pos


class _AttentionBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _TokenPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=1)


class _PowerMeanPool(nn.Module):
    """2x2 L4-norm pooling: a smooth stand-in for max-pooling.

    The guard keeps the fourth root differentiable when a window underflows to 0.
    """

    def forward(self, x):
        return (4 * F.avg_pool2d(x.pow(4), 2) + 1e-12).pow(0.25)


# Smooth activations and pooling keep input gradients free of kinks, so
# central differences agree with autograd at practical step sizes.
def _conv_block(cin, cout, k, pool):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.GELU(), pool)


def _stages_cnn_a(c, h, w, k):
    flat = 64 * (h // 8) * (w // 8)
    return OrderedDict(
        conv1=_conv_block(c, 16, 3, nn.AvgPool2d(2)),
        conv2=_conv_block(16, 32, 3, nn.AvgPool2d(2)),
        conv3=_conv_block(32, 64, 3, nn.AvgPool2d(2)),
        fc=nn.Sequential(_Flatten(), nn.Linear(flat, 128), nn.GELU()),
        logits=nn.Linear(128, k),
    )


def _stages_cnn_b(c, h, w, k):
    return OrderedDict(
        conv1=_conv_block(c, 16, 5, _PowerMeanPool()),
        conv2=_conv_block(16, 32, 3, _PowerMeanPool()),
        conv3=nn.Sequential(nn.Conv2d(32, 64, 3, padding=1), nn.GELU()),
        gap=nn.Sequential(nn.AdaptiveAvgPool2d(1), _Flatten()),
        logits=nn.Linear(64, k),
    )


def _stages_mlp(c, h, w, k):
    return OrderedDict(
        hidden1=nn.Sequential(_Flatten(), nn.Linear(c * h * w, 256), nn.ReLU()),
        hidden2=nn.Sequential(nn.Linear(256, 128), nn.ReLU()),
        logits=nn.Linear(128, k),
    )


def _stages_attention(c, h, w, k):
    patch, dim = 4, 64
    if h % patch or w % patch:
        raise ConfigError(f"tiny_attention needs H and W divisible by {patch}")
    return OrderedDict(
        embed=_PatchEmbed(c, dim, patch, (h // patch) * (w // patch)),
        attn=_AttentionBlock(dim, heads=4),
        pool=nn.Sequential(_TokenPool(), nn.LayerNorm(dim)),
        logits=nn.Linear(dim, k),
    )


_BUILDERS = {
    "small_cnn_a": _stages_cnn_a,
    "small_cnn_b": _stages_cnn_b,
    "small_mlp": _stages_mlp,
    "tiny_attention": _stages_attention,
}


def build_model(arch_id, num_classes, input_shape, seed=0):
    if arch_id not in _BUILDERS:
        raise ConfigError(f"unknown arch_id {arch_id!r}; expected one of {ARCHITECTURES}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    c, h, w = (int(s) for s in input_shape)
    if arch_id == "small_cnn_a" and (h < 8 or w < 8):
        raise ConfigError("small_cnn_a needs H, W >= 8")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(arch_id, num_classes, (c, h, w), _BUILDERS[arch_id](c, h, w, num_classes), seed)
    return model.eval()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(model, data, batch_size=256):
    model.eval()
    out = [model(data[i:i + batch_size]).argmax(dim=1) for i in range(0, len(data), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def accuracy(model, batch):
    if len(batch) == 0:
        return float("nan")
    return (predict(model, batch.data) == batch.labels).float().mean().item()


def train_classifier(model, train, test, cfg):
    """Train a private copy of ``model`` with Adam; returns ``(trained, metrics)``."""
    _check_shapes(model, train.data)
    _check_shapes(model, test.data)
    model = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    losses = []
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(model(train.data[idx]), train.labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        losses.append(total / max(seen, 1))
    model.eval()
    metrics = {
        "arch_id": model.arch_id,
        "epochs": cfg.epochs,
        "loss_curve": losses,
        "train_accuracy": accuracy(model, train),
        "test_accuracy": accuracy(model, test),
    }
    return model, metrics


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _check_shapes(model, data):
    if data.dim() != 4 or tuple(data.shape[1:]) != model.input_shape:
        raise ContractError(f"input shape {tuple(data.shape)} does not match model input {model.input_shape}")


def _as_data(batch):
    return batch.data if isinstance(batch, ImageBatch) else batch


def loss_and_input_grad(model, batch, labels=None, loss_kind="cross_entropy"):
    """Mean cross-entropy over the batch and its exact gradient w.r.t. the input pixels."""
    if loss_kind != "cross_entropy":
        raise ConfigError(f"unsupported loss_kind {loss_kind!r}")
    data = _as_data(batch)
    if labels is None:
        labels = batch.labels
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_shapes(model, data)
    if labels.shape != (data.shape[0],):
        raise ContractError(f"labels shape {tuple(labels.shape)} does not match batch size {data.shape[0]}")
    x = data.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(model(x), labels)
        (grad,) = torch.autograd.grad(loss, x)
    return loss.detach(), grad


def target_logit(labels):
    """Selector returning each sample's logit for its own label."""
    labels = torch.as_tensor(labels, dtype=torch.long)

    def select(logits):
        return logits.gather(1, labels.view(-1, 1)).squeeze(1)

    return select


def feature_and_grad(model, batch, layer_id, scalar_selector):
    """Activation at ``layer_id`` plus gradients of the summed per-sample scalar.

    ``scalar_selector`` maps logits (N, K) to one scalar per sample (N,), e.g.
    :func:`target_logit`.  Samples do not interact, so each image's gradients
    are those of its own scalar.
    """
    data = _as_data(batch)
    _check_shapes(model, data)
    x = data.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        feat, logits = model.forward_with_features(x, layer_id)
        scalar = scalar_selector(logits).sum()
        d_feat, d_x = torch.autograd.grad(scalar, (feat, x))
    return feat.detach(), d_feat, d_x


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (name, tensor) in enumerate(model.state_dict().items()):
        fname = f"param_{i:03d}.getf"
        tensorio.save_tensor(tensor, path / fname)
        files.append({"name": name, "file": fname, "shape": list(tensor.shape)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch_id": model.arch_id,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layer_names": model.layer_names,
        "seed": model.seed,
        "tensors": files,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path, expected_format=CHECKPOINT_FORMAT):
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise ParseError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("format") != expected_format:
        raise ParseError(f"{mpath} is not a {expected_format} manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_state_tensors(path, manifest, module):
    """Load the manifest's tensor files into ``module``, checking names and shapes."""
    path = Path(path)
    expected = module.state_dict()
    names = [t["name"] for t in manifest["tensors"]]
    if sorted(names) != sorted(expected):
        raise CheckpointMismatchError("checkpoint parameter names do not match the architecture")
    state = OrderedDict()
    for entry in manifest["tensors"]:
        tensor = tensorio.load_tensor(path / entry["file"])
        if tensor.shape != expected[entry["name"]].shape:
            raise CheckpointMismatchError(
                f"{entry['name']}: checkpoint shape {tuple(tensor.shape)} "
                f"!= architecture shape {tuple(expected[entry['name']].shape)}"
            )
        state[entry["name"]] = tensor
    module.load_state_dict(state)
    return module


def load_checkpoint(path, arch_id=None):
    manifest = read_manifest(path)
    if arch_id is not None and arch_id != manifest["arch_id"]:
        raise CheckpointMismatchError(f"checkpoint holds {manifest['arch_id']!r}, requested {arch_id!r}")
    model = build_model(manifest["arch_id"], manifest["num_classes"], manifest["input_shape"], manifest.get("seed", 0))
    if model.layer_names != manifest["layer_names"]:
        raise CheckpointMismatchError("layer names in manifest do not match the architecture")
    return load_state_tensors(path, manifest, model).eval()


def save_batch(batch, path):
    """Write an ImageBatch as ``<path>.data.getf`` / ``<path>.labels.getf``."""
    path = Path(path)
    tensorio.save_tensor(batch.data, path.with_name(path.name + ".data.getf"))
    tensorio.save_tensor(batch.labels.float(), path.with_name(path.name + ".labels.getf"))


def load_batch(path, num_classes=None):
    path = Path(path)
    data = tensorio.load_tensor(path.with_name(path.name + ".data.getf"))
    labels = tensorio.load_tensor(path.with_name(path.name + ".labels.getf")).round().long()
    return ImageBatch(data, labels, num_classes)
