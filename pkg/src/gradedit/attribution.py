"""Path-integrated attributions used by the NAA, DANAA and MIG oracles.

The scalar being attributed is always the true-class logit.  Path integrals are
right-endpoint Riemann sums: ``n`` points, the last one being the path's end.
"""

from dataclasses import dataclass

import torch

from .errors import ConfigError
from .zoo import target_logit

_F_KINDS = {"identity": lambda a: a}


@dataclass
class AttributionConfig:
    layer_id: str | None = None
    steps: int = 20
    beta: float = 1.0
    fp_kind: str = "identity"
    fn_kind: str = "identity"
    baseline_kind: str = "black"
    path_kind: str = "straight"
    path_lr: float = 2 / 255

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("attribution steps must be >= 1")
        if self.beta < 0:
            raise ConfigError("attribution beta must be >= 0")
        for name in ("fp_kind", "fn_kind"):
            if getattr(self, name) not in _F_KINDS:
                raise ConfigError(f"{name} must be one of {sorted(_F_KINDS)}")
        if self.baseline_kind != "black":
            raise ConfigError("baseline_kind must be 'black'")
        if self.path_kind not in ("straight", "nonlinear"):
            raise ConfigError("path_kind must be 'straight' or 'nonlinear'")
        if self.path_lr < 0:
            raise ConfigError("path_lr must be >= 0")


@dataclass
class AttributionResult:
    per_feature: torch.Tensor  # A, shaped like the layer activation
    weighted: torch.Tensor  # W per image, shape (N,)
    input_grad: torch.Tensor  # dW/dx, shaped like x


def baseline(x, kind="black"):
    if kind != "black":
        raise ConfigError(f"unknown baseline kind {kind!r}")
    return torch.zeros_like(x)


def straight_path(x, base, n):
    return [base + (m / n) * (x - base) for m in range(1, n + 1)]


def ascent_path(model, x, y, n, lr):
    """``n`` sign-ascent steps on the target logit starting at ``x``, kept in [0, 1]."""
    select = target_logit(y)
    points, cur = [], x.detach()
    for _ in range(n):
        if lr > 0:
            xt = cur.clone().requires_grad_(True)
            with torch.enable_grad():
                (grad,) = torch.autograd.grad(select(model(xt)).sum(), xt)
            cur = (cur + lr * grad.sign()).clamp(0.0, 1.0)
        points.append(cur)
    return points


def path_points(x, cfg, model=None, y=None):
    if cfg.path_kind == "straight":
        return straight_path(x, baseline(x, cfg.baseline_kind), cfg.steps)
    return ascent_path(model, x, y, cfg.steps, cfg.path_lr)


def mean_feature_grad(model, points, y, layer_id):
    """Average over path points of d(target logit)/d(layer activation)."""
    select = target_logit(y)
    total = None
    for p in points:
        with torch.enable_grad():
            feat, logits = model.forward_with_features(p.detach(), layer_id)
            feat = feat.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(select(model.forward_from(feat, layer_id)).sum(), feat)
        total = g if total is None else total + g
    return total / len(points)


def path_attribution(model, layer_id, y, points, start, end):
    """Per-feature attribution (phi(end) - phi(start)) * mean path gradient."""
    with torch.no_grad():
        delta = model.forward_with_features(end, layer_id)[0] - model.forward_with_features(start, layer_id)[0]
    return delta * mean_feature_grad(model, points, y, layer_id)


def weighted_attribution(A, beta=1.0, fp=_F_KINDS["identity"], fn=_F_KINDS["identity"]):
    """Per-image W = sum_{A>0} fp(A) - beta * sum_{A<0} fn(-A).

    Zero attributions contribute nothing, to the value or to the gradient.
    """
    pos = torch.where(A > 0, fp(A.clamp(min=0)), torch.zeros_like(A))
    neg = torch.where(A < 0, fn((-A).clamp(min=0)), torch.zeros_like(A))
    return (pos - beta * neg).flatten(1).sum(dim=1)


def _weights(A, cfg):
    a = A.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        W = weighted_attribution(a, cfg.beta, _F_KINDS[cfg.fp_kind], _F_KINDS[cfg.fn_kind])
        (dW_dA,) = torch.autograd.grad(W.sum(), a)
    return W.detach(), dW_dA


def _grad_through_layer(model, x_live, layer_id, coef):
    xi = x_live.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        feat, _ = model.forward_with_features(xi, layer_id)
        (g,) = torch.autograd.grad((feat * coef).sum(), xi)
    return g


def neuron_attribution(model, x, y, cfg):
    """Layer attribution and the input gradient of its weighted sum.

    straight path (NAA): A = (phi(x) - phi(b)) * IA, IA averaged over b -> x.
    nonlinear path (DANAA): the path ascends the target logit from x to x_end;
    A = (y(x_end) - y(x)) * gamma with gamma averaged along that path.  The
    input gradient flows through the live endpoint (x for NAA, x_end for DANAA)
    with the per-feature path gradients held fixed.
    """
    if cfg.layer_id is None:
        raise ConfigError("attribution requires a layer_id")
    x = x.detach()
    if cfg.path_kind == "straight":
        start = baseline(x, cfg.baseline_kind)
        points = straight_path(x, start, cfg.steps)
        end = x
    else:
        start = x
        points = ascent_path(model, x, y, cfg.steps, cfg.path_lr)
        end = points[-1]
    grad_avg = mean_feature_grad(model, points, y, cfg.layer_id)
    with torch.no_grad():
        delta = model.forward_with_features(end, cfg.layer_id)[0] - model.forward_with_features(start, cfg.layer_id)[0]
    A = delta * grad_avg
    W, dW_dA = _weights(A, cfg)
    input_grad = _grad_through_layer(model, end, cfg.layer_id, (dW_dA * grad_avg).detach())
    return AttributionResult(A, W, input_grad)


def integrated_gradients(model, x, y, n, base=None):
    """(x - b) * mean_{m=1..n} grad_x f_y(b + (m/n)(x - b)), b black by default."""
    x = x.detach()
    if base is None:
        base = baseline(x)
    select = target_logit(y)
    total = torch.zeros_like(x)
    for p in straight_path(x, base, n):
        p = p.clone().requires_grad_(True)
        with torch.enable_grad():
            (g,) = torch.autograd.grad(select(model(p)).sum(), p)
        total += g
    return (x - base) * (total / n)
