"""AdvGAN baseline and gradient-edited generator training.

The generator emits a perturbation bounded by ``epsilon * tanh``; the edited
trainer replaces the surrogate-loss gradient at ``x + G(x)`` with an oracle
direction injected as the upstream cotangent of ``G(x)``.
"""

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio
from .attacks import AdversarialResult
from .errors import AttackError, ConfigError, TrainingDivergedError
from .freq import FreqExploreConfig
from .oracles import OracleConfig, l1_normalize, make_oracle
from .zoo import load_state_tensors, predict, read_manifest

GENERATOR_FORMAT = "gradedit-generator"
DISCRIMINATOR_FORMAT = "gradedit-discriminator"
LOG_GUARD = 1e-12


class PerturbationGenerator(nn.Module):
    """Tiny encoder-decoder; output is epsilon * tanh(raw), so |delta| <= epsilon elementwise."""

    def __init__(self, shape, epsilon=16 / 255, width=12):
        super().__init__()
        c, h, w = (int(s) for s in shape)
        if h % 4 or w % 4:
            raise ConfigError("generator needs H and W divisible by 4")
        self.shape = (c, h, w)
        self.epsilon = float(epsilon)
        self.width = width
        w1, w2, w3 = width, 2 * width, 8 * width // 3
        self.net = nn.Sequential(
            nn.Conv2d(c, w1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w3, w2, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w2, w1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w1, c, 3, padding=1),
        )

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        return self.epsilon * torch.tanh(self.net(x))


class Discriminator(nn.Module):
    """Small strided conv net with a sigmoid head; outputs lie strictly inside (0, 1)."""

    def __init__(self, shape, width=8):
        super().__init__()
        c, h, w = (int(s) for s in shape)
        self.shape = (c, h, w)
        self.net = nn.Sequential(
            nn.Conv2d(c, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(2 * width * (h // 4) * (w // 4), 1),
        )

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        return torch.sigmoid(self.net(x)).squeeze(1).clamp(1e-7, 1 - 1e-7)


def build_generator(shape, seed=0, epsilon=16 / 255):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PerturbationGenerator(shape, epsilon)


def build_discriminator(shape, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(shape)


@torch.no_grad()
def generate_adversarial(G, x, epsilon=None, surrogate=None, batch_size=1000):
    """Single forward pass: x_adv = clamp(x + delta, 0, 1).

    ``epsilon`` rescales the generator's native bound; ``None`` keeps it.
    """
    G.eval()
    chunks = []
    for i in range(0, len(x), batch_size):
        delta = G(x[i:i + batch_size])
        if epsilon is not None:
            delta = delta * (epsilon / G.epsilon) if G.epsilon > 0 else torch.zeros_like(delta)
        chunks.append(delta)
    delta = torch.cat(chunks) if chunks else torch.zeros_like(x)
    x_adv = (x + delta).clamp(0.0, 1.0)
    if surrogate is not None:
        success = predict(surrogate, x_adv) != predict(surrogate, x)
    else:
        success = torch.zeros(len(x), dtype=torch.bool)
    return AdversarialResult(x_adv, x_adv - x, success)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _log(p):
    return torch.log(p.clamp(min=LOG_GUARD))


def discriminator_loss(d_real, d_fake):
    return -(_log(d_real) + _log(1 - d_fake)).mean()


def generator_gan_loss(d_fake):
    """Non-saturating form -E[log D(x_adv)]."""
    return -_log(d_fake).mean()


def gan_losses(D, x_real, x_adv):
    d_fake = D(x_adv)
    return discriminator_loss(D(x_real), d_fake), generator_gan_loss(d_fake)


def cw_margin(logits, y, kappa=0.0):
    """max(Z_y - max_{i != y} Z_i, -kappa) per sample: positive while still classified as y."""
    true = logits.gather(1, y.view(-1, 1)).squeeze(1)
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).max(dim=1).values
    return (true - other).clamp(min=-kappa)


def adversarial_objective(logits, y, kind="ce", kappa=0.0):
    """Surrogate loss the baseline generator ascends (higher = more adversarial)."""
    if kind == "cw":
        return -cw_margin(logits, y, kappa).mean()
    return F.cross_entropy(logits, y)


def hinge_loss(delta, c):
    return (delta.flatten(1).norm(dim=1) - c).clamp(min=0).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GanTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    alpha: float = 1.0
    beta: float = 1.0
    adv_lambda: float = 10.0
    eta_G: tuple = (1e-4, 1e-4)
    eta_D: tuple = (1e-4, 1e-4)
    change_thresholds: tuple = (20, 40)
    d_steps: tuple = (1, 1)
    g_steps: tuple = (2, 1)
    hinge_bound: float | None = None  # None: 0.3 * epsilon * sqrt(C*H*W)
    epsilon: float = 16 / 255
    oracle: OracleConfig = field(default_factory=OracleConfig)
    freq: FreqExploreConfig | None = None  # overrides oracle.freq when set
    optimizer: str = "adam"
    injection: str = "l1"  # "l1": -g/||g||_1 ; "sign": -sign(g)
    adv_loss: str = "ce"  # baseline surrogate loss: "ce" or "cw" (clamped logit margin)
    cw_kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.oracle, dict):
            self.oracle = OracleConfig(**self.oracle)
        if isinstance(self.freq, dict):
            self.freq = FreqExploreConfig(**self.freq)
        for name in ("eta_G", "eta_D", "change_thresholds", "d_steps", "g_steps"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("alpha", "beta", "adv_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("eta_G", "eta_D"):
            rates = getattr(self, name)
            if not rates or any(r <= 0 for r in rates):
                raise ConfigError(f"{name} must be a non-empty list of positive rates")
        for name in ("d_steps", "g_steps"):
            steps = getattr(self, name)
            if not steps or any(s < 0 for s in steps):
                raise ConfigError(f"{name} must be a non-empty list of counts >= 0")
        th = self.change_thresholds
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("change_thresholds must be strictly increasing")
        if th and self.epochs and th[-1] >= self.epochs:
            raise ConfigError(f"change_thresholds {list(th)} must be < epochs ({self.epochs})")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.injection not in ("l1", "sign"):
            raise ConfigError("injection must be 'l1' or 'sign'")
        if self.adv_loss not in ("ce", "cw"):
            raise ConfigError("adv_loss must be 'ce' or 'cw'")
        if self.cw_kappa < 0:
            raise ConfigError("cw_kappa must be >= 0")

    def resolved_oracle(self):
        cfg = replace(self.oracle, epsilon=self.epsilon) if self.epsilon > 0 else self.oracle
        if self.freq is not None:
            cfg = replace(cfg, freq=self.freq)
        return cfg

    def phase(self, epoch):
        return sum(1 for t in self.change_thresholds if epoch >= t)

    def hinge_c(self, shape):
        if self.hinge_bound is not None:
            return self.hinge_bound
        return 0.3 * self.epsilon * math.sqrt(math.prod(shape))

    def to_dict(self):
        return asdict(self)


def _pick(pair, phase):
    return pair[min(phase, len(pair) - 1)]


def _make_opt(kind, params, lr):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def edited_cotangent(g, injection="l1"):
    """Upstream gradient for G(x) built from an ascent direction g (descending it ascends g)."""
    if injection == "sign":
        return -g.sign()
    return -l1_normalize(g)


def _train(G, D, surrogate, dataset, cfg, edited):
    G, D = copy.deepcopy(G), copy.deepcopy(D)
    surrogate.eval()
    frozen = [(p, p.requires_grad) for p in surrogate.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)
    opt_G = _make_opt(cfg.optimizer, G.parameters(), cfg.eta_G[0])
    opt_D = _make_opt(cfg.optimizer, D.parameters(), cfg.eta_D[0])
    gen = torch.Generator().manual_seed(cfg.seed)
    oracle = make_oracle(cfg.resolved_oracle(), surrogate) if edited and cfg.adv_lambda > 0 else None
    c = cfg.hinge_c(tuple(dataset.data.shape[1:]))
    history = []
    try:
        for epoch in range(cfg.epochs):
            phase = cfg.phase(epoch)
            _set_lr(opt_G, _pick(cfg.eta_G, phase))
            _set_lr(opt_D, _pick(cfg.eta_D, phase))
            d_steps, g_steps = _pick(cfg.d_steps, phase), _pick(cfg.g_steps, phase)
            G.train()
            D.train()
            order = torch.randperm(len(dataset), generator=gen)
            sums = {"loss_D": 0.0, "loss_G": 0.0, "loss_adv": 0.0}
            batches = 0
            for batch_idx, start in enumerate(range(0, len(dataset), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                x, y = dataset.data[idx], dataset.labels[idx]
                loss_D = torch.zeros(())
                for _ in range(d_steps):
                    with torch.no_grad():
                        x_adv = (x + G(x)).clamp(0, 1)
                    loss_D = discriminator_loss(D(x), D(x_adv))
                    opt_D.zero_grad()
                    loss_D.backward()
                    opt_D.step()
                loss_G = adv_value = torch.zeros(())
                for _ in range(g_steps):
                    delta = G(x)
                    x_adv = (x + delta).clamp(0, 1)
                    loss_G = cfg.alpha * generator_gan_loss(D(x_adv)) + cfg.beta * hinge_loss(delta, c)
                    opt_G.zero_grad()
                    if edited:
                        if oracle is not None:
                            oracle.state = type(oracle.state)()
                            g = oracle.step(x_adv.detach(), x, y).g
                            if not torch.isfinite(g).all():
                                raise AttackError(f"oracle {oracle.method} returned non-finite output "
                                                  f"at epoch {epoch}, batch {batch_idx}")
                            u = cfg.adv_lambda * edited_cotangent(g, cfg.injection)
                            (loss_G + (delta * u.detach()).sum()).backward()
                            with torch.no_grad():
                                adv_value = F.cross_entropy(surrogate(x_adv), y)
                        else:
                            loss_G.backward()
                    else:
                        adv_value = adversarial_objective(surrogate(x_adv), y, cfg.adv_loss, cfg.cw_kappa)
                        (loss_G - cfg.adv_lambda * adv_value).backward()
                    opt_G.step()
                if not (torch.isfinite(loss_D) and torch.isfinite(loss_G)):
                    raise TrainingDivergedError(epoch, f"non-finite GAN loss at batch {batch_idx}")
                sums["loss_D"] += loss_D.item()
                sums["loss_G"] += loss_G.item()
                sums["loss_adv"] += float(adv_value.detach())
                batches += 1
            history.append({k: v / max(batches, 1) for k, v in sums.items()})
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    G.eval()
    D.eval()
    return G, D, history


def train_advgan_baseline(G, D, surrogate, dataset, cfg):
    """AdvGAN: G minimises alpha*L_GAN + beta*L_hinge - adv_lambda*L(f(x + G(x)), y).

    L is cross-entropy (``adv_loss="ce"``) or the negated clamped C&W margin (``"cw"``).

    Returns ``(G, D, history)``; inputs are left untouched.
    """
    return _train(G, D, surrogate, dataset, cfg, edited=False)


def train_ge_advgan(G, D, surrogate, dataset, cfg):
    """Gradient-edited AdvGAN: the oracle direction at x + G(x) replaces the CE gradient."""
    return _train(G, D, surrogate, dataset, cfg, edited=True)


def variant_name(method):
    if method in (None, "baseline", "advgan"):
        return "AdvGAN"
    if method == "fsps":
        return "GE-AdvGAN++"
    return f"GE-AdvGAN({method})"


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_generator(G, path, cfg=None, method=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (name, tensor) in enumerate(G.state_dict().items()):
        fname = f"param_{i:03d}.getf"
        tensorio.save_tensor(tensor, path / fname)
        files.append({"name": name, "file": fname, "shape": list(tensor.shape)})
    manifest = {
        "format": GENERATOR_FORMAT,
        "version": 1,
        "shape": list(G.shape),
        "epsilon": G.epsilon,
        "width": G.width,
        "param_count": G.param_count,
        "method": method or "baseline",
        "name": variant_name(method),
        "config": cfg.to_dict() if cfg is not None else None,
        "tensors": files,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_generator(path):
    manifest = read_manifest(path, GENERATOR_FORMAT)
    G = PerturbationGenerator(manifest["shape"], manifest["epsilon"], manifest.get("width", 12))
    return load_state_tensors(path, manifest, G).eval(), manifest
