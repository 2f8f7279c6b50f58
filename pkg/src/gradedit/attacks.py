"""Iterative sign-step attack driver, projection, random start and stationary-point search."""

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import tensorio
from .errors import AttackError, ConfigError
from .zoo import predict

DEFAULT_EPSILON = 16 / 255
DEFAULT_ITERATIONS = 10
DEFAULT_ALPHA = 1.6 / 255


@dataclass
class AttackBudget:
    epsilon: float = DEFAULT_EPSILON
    step_alpha: float = DEFAULT_ALPHA
    iterations: int = DEFAULT_ITERATIONS
    random_start: bool | None = None  # None: only for PGD
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ConfigError("epsilon must lie in (0, 1]")
        if not 0 < self.step_alpha <= self.epsilon:
            raise ConfigError("step_alpha must lie in (0, epsilon]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")


@dataclass
class AdversarialResult:
    x_adv: torch.Tensor
    delta: torch.Tensor
    success: torch.Tensor
    trace: list | None = None


def clip_project(x, x0, epsilon):
    """Project onto the L-inf ball of radius epsilon around x0, then onto [0, 1]."""
    return torch.min(torch.max(x, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)


def random_start(x0, epsilon, seed):
    gen = torch.Generator().manual_seed(seed)
    noise = (torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * 2 - 1) * epsilon
    return clip_project(x0 + noise, x0, epsilon)


def _per_sample_ce(model):
    def loss(x, y):
        return F.cross_entropy(model(x), y, reduction="sum")
    return loss


def stationary_point_search(surrogate, x, y, epsilon, max_steps=50, grad_tol=1e-4, lr=DEFAULT_ALPHA,
                            center=None, loss_fn=None):
    """Projected gradient descent on the loss, starting at ``x``.

    Iterates stay within the epsilon-ball around ``center`` (default ``x``) and
    [0, 1].  Stops once the gradient's max-abs entry drops below ``grad_tol``.
    ``loss_fn(x, y) -> scalar`` defaults to the per-sample cross-entropy summed
    over the batch, so each image descends independently.
    """
    if loss_fn is None:
        loss_fn = _per_sample_ce(surrogate)
    center = x.detach() if center is None else center.detach()
    cur = clip_project(x.detach(), center, epsilon)
    for _ in range(max_steps):
        xi = cur.clone().requires_grad_(True)
        with torch.enable_grad():
            (grad,) = torch.autograd.grad(loss_fn(xi, y), xi)
        if grad.abs().max().item() < grad_tol:
            break
        cur = clip_project(cur - lr * grad, center, epsilon)
    return cur


def iterative_attack(surrogate, x0, y, oracle, budget, record_trace=True):
    """Run K sign steps x <- Clip(x + alpha * sign(g)) with g supplied by ``oracle``."""
    x0 = x0.detach()
    y = torch.as_tensor(y, dtype=torch.long)
    use_start = budget.random_start if budget.random_start is not None else oracle.method == "pgd"
    x = random_start(x0, budget.epsilon, budget.seed) if use_start else x0.clone()
    trace = [] if record_trace else None
    for k in range(budget.iterations):
        if oracle.needs_stationary_point:
            sp_lr = oracle.cfg.sp_lr if oracle.cfg.sp_lr is not None else budget.step_alpha
            oracle.set_stationary_point(stationary_point_search(
                surrogate, x, y, budget.epsilon, oracle.cfg.sp_max_steps, oracle.cfg.sp_grad_tol, sp_lr, center=x0))
        g = oracle.step(x, x0, y).g
        if not torch.isfinite(g).all():
            raise AttackError(f"non-finite oracle output at iteration {k} (method {oracle.method})")
        x = clip_project(x + budget.step_alpha * g.sign(), x0, budget.epsilon)
        if record_trace:
            with torch.no_grad():
                trace.append(F.cross_entropy(surrogate(x), y).item())
    success = predict(surrogate, x) != predict(surrogate, x0)
    return AdversarialResult(x, x - x0, success, trace)


def logistic_loss(w, b, x, y):
    """Binary logistic loss of labels y in {0, 1} for logit w.x + b (float64, batched over x)."""
    s = 2.0 * y - 1.0
    return np.logaddexp(0.0, -s * (x @ w + b))


def fgsm_optimality_check(w, b, x0, y, epsilon, tie_tol=1e-9):
    """Brute-force check that x0 + eps*sign(grad) maximises the logistic loss over all ball corners."""
    w = np.asarray(w, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    d = w.size
    if d > 12:
        raise ConfigError("brute-force corner check is limited to d <= 12")
    s = 2.0 * y - 1.0
    p = 1.0 / (1.0 + np.exp(s * (x0 @ w + b)))
    grad = -s * p * w
    fgsm = x0 + epsilon * np.sign(grad)
    corners = x0 + epsilon * np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    best = logistic_loss(w, b, corners, y).max()
    return bool(logistic_loss(w, b, fgsm[None], y)[0] >= best - tie_tol)


def save_adversarial(result, path, sidecar):
    """Write ``<path>.adv.getf`` plus a JSON sidecar; ``sidecar`` is merged into the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(result.x_adv, path.with_name(path.name + ".adv.getf"))
    meta = dict(sidecar)
    meta["success"] = [bool(s) for s in result.success.tolist()]
    meta["linf"] = float(result.delta.abs().max()) if result.delta.numel() else 0.0
    if result.trace is not None:
        meta["trace"] = result.trace
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))


def load_adversarial(path):
    path = Path(path)
    x_adv = tensorio.load_tensor(path.with_name(path.name + ".adv.getf"))
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return x_adv, meta


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
