"""Gradient-editing oracles: each produces the ascent direction g^(k+1) for the sign-step driver.

Every oracle returns a direction in which the surrogate's loss (or, for the
attribution methods, the attack objective) increases; the driver always adds
``alpha * sign(g)``.
"""

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .attribution import AttributionConfig, integrated_gradients, neuron_attribution
from .errors import ConfigError, OracleStateError
from .freq import FreqExploreConfig, spectrum_variants

METHODS = ("bim", "pgd", "mim", "gra", "dim", "tim", "sinim", "fsps", "sia", "naa", "danaa", "mig")
MOMENTUM_METHODS = ("mim", "gra", "naa", "danaa", "mig")
ATTRIBUTION_METHODS = ("naa", "danaa")
SIA_POOL = ("identity", "hflip", "vflip", "rot90", "scale", "noise")

L1_GUARD = 1e-12


@dataclass
class OracleConfig:
    method: str = "fsps"
    mu: float | None = None  # None: 1.0 for momentum methods, 0.0 (no momentum) otherwise
    epsilon: float = 16 / 255
    seed: int = 0
    gra_temperature: float = 1.0
    gra_neighbors: int = 10
    gra_radius: float | None = None  # None: epsilon
    dim_prob: float = 0.5
    dim_resize_range: tuple = (0.85, 1.0)
    dim_copies: int = 10
    tim_max_shift: int = 3
    tim_copies: int = 10
    tim_enumerate: bool = False
    sinim_sigma: float = 0.05
    sinim_copies: int = 10
    freq: FreqExploreConfig = field(default_factory=FreqExploreConfig)
    fsps_warmup: int = 5
    sp_max_steps: int = 50
    sp_grad_tol: float = 1e-4
    sp_lr: float | None = None  # None: the attack step size
    sia_blocks: int = 3
    sia_copies: int = 10
    sia_pool: tuple = SIA_POOL
    attribution: AttributionConfig = field(default_factory=AttributionConfig)

    def __post_init__(self):
        if isinstance(self.freq, dict):
            self.freq = FreqExploreConfig(**self.freq)
        if isinstance(self.attribution, dict):
            self.attribution = AttributionConfig(**self.attribution)
        self.dim_resize_range = tuple(float(v) for v in self.dim_resize_range)
        self.sia_pool = tuple(self.sia_pool)
        if self.method not in METHODS:
            raise ConfigError(f"unknown oracle method {self.method!r}; expected one of {METHODS}")
        if self.mu is not None and not 0.0 <= self.mu <= 1.0:
            raise ConfigError("mu must lie in [0, 1]")
        if not 0 < self.epsilon <= 1:
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.gra_temperature <= 0:
            raise ConfigError("gra_temperature must be positive")
        if self.gra_neighbors < 1:
            raise ConfigError("gra_neighbors must be >= 1")
        if self.gra_radius is not None and self.gra_radius <= 0:
            raise ConfigError("gra_radius must be positive")
        if not 0.0 <= self.dim_prob <= 1.0:
            raise ConfigError("dim_prob must lie in [0, 1]")
        low, high = self.dim_resize_range
        if not (0 < low <= high <= 1):
            raise ConfigError("dim_resize_range must satisfy 0 < low <= high <= 1")
        if self.tim_max_shift < 0:
            raise ConfigError("tim_max_shift must be >= 0")
        if self.sinim_sigma < 0:
            raise ConfigError("sinim_sigma must be >= 0")
        for name in ("dim_copies", "tim_copies", "sinim_copies", "sia_copies", "sia_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.fsps_warmup < 0 or self.sp_max_steps < 0:
            raise ConfigError("fsps_warmup and sp_max_steps must be >= 0")
        if not set(self.sia_pool) <= set(SIA_POOL) or not self.sia_pool:
            raise ConfigError(f"sia_pool must be a non-empty subset of {SIA_POOL}")

    @property
    def momentum(self):
        if self.mu is not None:
            return self.mu
        return 1.0 if self.method in MOMENTUM_METHODS else 0.0


@dataclass
class OracleState:
    g: torch.Tensor | None = None  # accumulated direction; None stands for the zero tensor
    k: int = 0
    sp: torch.Tensor | None = None


@dataclass
class OracleStep:
    g: torch.Tensor
    state: OracleState


# ---------------------------------------------------------------------------
# Gradient kernels
# ---------------------------------------------------------------------------


def input_grad(model, x, y):
    """Gradient of the batch-mean cross-entropy with respect to ``x``."""
    xi = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(F.cross_entropy(model(xi), y), xi)
    return g


def mean_grad_over(model, variants, y):
    """Mean over variants of the batch-mean cross-entropy gradient at each variant.

    Variants are evaluated in one stacked batch.
    """
    stacked = torch.cat([v.detach() for v in variants]).requires_grad_(True)
    labels = y.repeat(len(variants))
    with torch.enable_grad():
        loss = F.cross_entropy(model(stacked), labels, reduction="sum") / y.shape[0]
        (g,) = torch.autograd.grad(loss, stacked)
    return g.view(len(variants), *variants[0].shape).mean(dim=0)


def mean_grad_through(model, x, y, transforms):
    """Mean over ``transforms`` of grad_x CE(f(T(x))); autograd supplies each T's adjoint."""
    xi = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        stacked = torch.cat([t(xi) for t in transforms])
        loss = F.cross_entropy(model(stacked), y.repeat(len(transforms)), reduction="sum") / y.shape[0]
        (g,) = torch.autograd.grad(loss, xi)
    return g / len(transforms)


def l1_normalize(t):
    norm = t.abs().flatten(1).sum(dim=1).view(-1, *([1] * (t.dim() - 1)))
    return t / (norm + L1_GUARD)


# ---------------------------------------------------------------------------
# Input transforms
# ---------------------------------------------------------------------------


def diverse_input(x, frac, top, left):
    """Resize ``x`` to round(frac * (H, W)) and zero-pad back to (H, W) at (top, left)."""
    h, w = x.shape[-2:]
    nh, nw = max(1, round(frac * h)), max(1, round(frac * w))
    small = x if (nh, nw) == (h, w) else F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    return F.pad(small, (left, w - nw - left, top, h - nh - top))


def translate(x, dy, dx):
    """Shift image content by (dy, dx) pixels, filling vacated pixels with zeros."""
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return torch.zeros_like(x)
    padded = F.pad(x, (max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0)))
    return padded[..., max(-dy, 0):max(-dy, 0) + h, max(-dx, 0):max(-dx, 0) + w]


def block_edges(size, blocks):
    blocks = min(blocks, size)
    return [round(i * size / blocks) for i in range(blocks + 1)]


def _apply_block(block, kind, gen):
    if kind == "hflip":
        return block.flip(-1)
    if kind == "vflip":
        return block.flip(-2)
    if kind == "rot90":
        if block.shape[-1] != block.shape[-2]:
            return block
        return torch.rot90(block, 1, dims=(-2, -1))
    if kind == "scale":
        factor = 0.7 + 0.6 * torch.rand((), generator=gen).item()
        return block * factor
    if kind == "noise":
        return block + (torch.rand(block.shape, generator=gen) * 0.2 - 0.1)
    return block


def structure_transform(x, blocks, pool, gen):
    """Split each image into a blocks x blocks grid and transform every block independently."""
    out = x.clone()
    rows, cols = block_edges(x.shape[-2], blocks), block_edges(x.shape[-1], blocks)
    for i in range(len(rows) - 1):
        for j in range(len(cols) - 1):
            kind = pool[int(torch.randint(len(pool), (), generator=gen))]
            sl = (..., slice(rows[i], rows[i + 1]), slice(cols[j], cols[j + 1]))
            out[sl] = _apply_block(x[sl], kind, gen)
    return out


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


class GradientOracle:
    """Stateful g^(k+1) producer.  Not safe to share across concurrent attacks."""

    def __init__(self, cfg, surrogate):
        self.cfg = cfg
        self.model = surrogate
        self.reset()

    def reset(self):
        self.state = OracleState()
        self.gen = torch.Generator().manual_seed(self.cfg.seed)

    @property
    def method(self):
        return self.cfg.method

    @property
    def needs_stationary_point(self):
        return self.cfg.method == "fsps" and self.state.k >= self.cfg.fsps_warmup and self.state.sp is None

    def set_stationary_point(self, sp):
        self.state.sp = sp.detach().clone()

    def step(self, x_k, x0, y):
        x_k = x_k.detach()
        y = torch.as_tensor(y, dtype=torch.long)
        direction = getattr(self, f"_dir_{self.cfg.method}")(x_k, x0, y)
        mu = self.cfg.momentum
        if self.cfg.method in MOMENTUM_METHODS or mu > 0:
            g = l1_normalize(direction)
            if self.state.g is not None:
                g = mu * self.state.g + g
        else:
            g = direction
        self.state = OracleState(g=g, k=self.state.k + 1, sp=self.state.sp)
        return OracleStep(g, self.state)

    # Each _dir_* returns the raw (pre-momentum) ascent direction.

    def _dir_bim(self, x_k, x0, y):
        return input_grad(self.model, x_k, y)

    _dir_pgd = _dir_bim
    _dir_mim = _dir_bim

    def gra_weights(self, G, neighbour_grads):
        """Softmax over neighbours of cos(G, G_i) / temperature, per image: shape (n, N)."""
        flat = G.flatten(1)
        cos = torch.stack([F.cosine_similarity(flat, Gi.flatten(1), dim=1, eps=L1_GUARD) for Gi in neighbour_grads])
        return torch.softmax(cos / self.cfg.gra_temperature, dim=0)

    def _dir_gra(self, x_k, x0, y):
        r = self.cfg.gra_radius if self.cfg.gra_radius is not None else self.cfg.epsilon
        G = input_grad(self.model, x_k, y)
        neighbours = [x_k + (torch.rand(x_k.shape, generator=self.gen) * 2 - 1) * r
                      for _ in range(self.cfg.gra_neighbors)]
        grads = [input_grad(self.model, xi, y) for xi in neighbours]
        w = self.gra_weights(G, grads)
        shape = (-1,) + (1,) * (x_k.dim() - 1)
        return sum(wi.view(shape) * Gi for wi, Gi in zip(w, grads))

    def _dim_transform(self, h, w):
        if torch.rand((), generator=self.gen).item() >= self.cfg.dim_prob:
            return lambda t: t
        low, high = self.cfg.dim_resize_range
        frac = low + (high - low) * torch.rand((), generator=self.gen).item()
        nh, nw = max(1, round(frac * h)), max(1, round(frac * w))
        top = int(torch.randint(h - nh + 1, (), generator=self.gen))
        left = int(torch.randint(w - nw + 1, (), generator=self.gen))
        return lambda t: diverse_input(t, frac, top, left)

    def _dir_dim(self, x_k, x0, y):
        h, w = x_k.shape[-2:]
        transforms = [self._dim_transform(h, w) for _ in range(self.cfg.dim_copies)]
        return mean_grad_through(self.model, x_k, y, transforms)

    def tim_shifts(self):
        m = self.cfg.tim_max_shift
        if self.cfg.tim_enumerate:
            return [(dy, dx) for dy in range(-m, m + 1) for dx in range(-m, m + 1)]
        draws = torch.randint(-m, m + 1, (self.cfg.tim_copies, 2), generator=self.gen)
        return [(int(dy), int(dx)) for dy, dx in draws]

    def _dir_tim(self, x_k, x0, y):
        transforms = [lambda t, s=s: translate(t, *s) for s in self.tim_shifts()]
        return mean_grad_through(self.model, x_k, y, transforms)

    def _dir_sinim(self, x_k, x0, y):
        variants = [x_k + self.cfg.sinim_sigma * torch.randn(x_k.shape, generator=self.gen)
                    for _ in range(self.cfg.sinim_copies)]
        return mean_grad_over(self.model, variants, y)

    def fsps_base(self, x_k):
        if self.state.k < self.cfg.fsps_warmup:
            return x_k
        if self.state.sp is None:
            raise OracleStateError("FSPS stationary point requested before it was computed")
        return self.state.sp

    def _dir_fsps(self, x_k, x0, y):
        base = self.fsps_base(x_k)
        variants = spectrum_variants(base, self.cfg.freq, generator=self.gen)
        return mean_grad_over(self.model, variants, y)

    def _dir_sia(self, x_k, x0, y):
        variants = [structure_transform(x_k, self.cfg.sia_blocks, self.cfg.sia_pool, self.gen)
                    for _ in range(self.cfg.sia_copies)]
        return mean_grad_over(self.model, variants, y)

    def _dir_naa(self, x_k, x0, y):
        return -neuron_attribution(self.model, x_k, y, self._attr_cfg("straight")).input_grad

    def _dir_danaa(self, x_k, x0, y):
        return -neuron_attribution(self.model, x_k, y, self._attr_cfg("nonlinear")).input_grad

    def _dir_mig(self, x_k, x0, y):
        return -integrated_gradients(self.model, x_k, y, self.cfg.attribution.steps)

    def _attr_cfg(self, path_kind):
        return replace(self.cfg.attribution, path_kind=path_kind)


def make_oracle(cfg, surrogate):
    if not isinstance(cfg, OracleConfig):
        raise ConfigError("expected an OracleConfig")
    if cfg.method in ATTRIBUTION_METHODS:
        layer = cfg.attribution.layer_id
        if layer is None:
            raise ConfigError(f"method {cfg.method!r} requires attribution.layer_id")
        if layer not in surrogate.layer_names:
            raise ConfigError(f"layer {layer!r} not in surrogate layers {surrogate.layer_names}")
    return GradientOracle(cfg, surrogate)
