"""Independent oracles and toy models shared by the test suite."""

import copy
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gradedit.zoo import Classifier


class Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


class Constant(nn.Module):
    """Ignores its input apart from the batch size."""

    def __init__(self, num_classes):
        super().__init__()
        self.bias = nn.Parameter(torch.arange(num_classes, dtype=torch.float32))

    def forward(self, x):
        return self.bias.expand(x.shape[0], -1) + 0.0 * x.flatten(1).sum(dim=1, keepdim=True)


class Identity(nn.Module):
    def forward(self, x):
        return x


class SumHead(nn.Module):
    """Maps (N, D) features to logits whose every class equals sum(features)."""

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        return x.flatten(1).sum(dim=1, keepdim=True).expand(-1, self.num_classes)


def linear_classifier(weight, bias, input_shape):
    """Classifier with a single linear stage: logits = W x + b."""
    weight = torch.as_tensor(weight, dtype=torch.float32)
    lin = nn.Linear(weight.shape[1], weight.shape[0])
    with torch.no_grad():
        lin.weight.copy_(weight)
        lin.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))
    stages = OrderedDict(flat=Flatten(), logits=lin)
    return Classifier("linear", weight.shape[0], input_shape, stages).eval()


def constant_classifier(num_classes, input_shape):
    stages = OrderedDict(features=Identity(), logits=Constant(num_classes))
    return Classifier("constant", num_classes, input_shape, stages).eval()


def sum_classifier(num_classes, input_shape):
    """phi(x) = x at layer 'phi'; every logit equals sum(phi)."""
    stages = OrderedDict(phi=Flatten(), logits=SumHead(num_classes))
    return Classifier("sum", num_classes, input_shape, stages).eval()


def smooth_classifier(input_shape, num_classes=3, seed=0):
    """Small smooth (tanh) network whose 'lin' layer is linear in the input."""
    c, h, w = input_shape
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        stages = OrderedDict(
            lin=nn.Sequential(Flatten(), nn.Linear(c * h * w, 16)),
            act=nn.Tanh(),
            logits=nn.Linear(16, num_classes),
        )
    return Classifier("smooth", num_classes, input_shape, stages).eval()


def central_difference_input_grad(model, x, y, coords, step=1e-3):
    """Central differences of mean cross-entropy in float64 at flat input coordinates."""
    m64 = copy.deepcopy(model).double()
    x64 = x.double()
    flat = x64.flatten()
    out = []
    with torch.no_grad():
        for i in coords:
            plus, minus = flat.clone(), flat.clone()
            plus[i] += step
            minus[i] -= step
            lp = F.cross_entropy(m64(plus.view_as(x64)), y)
            lm = F.cross_entropy(m64(minus.view_as(x64)), y)
            out.append(((lp - lm) / (2 * step)).item())
    return np.array(out)


def central_difference_feature_grad(model, x, y, layer_id, coords, step=1e-3):
    """Central differences of summed target logits w.r.t. flat coordinates of a layer's activation."""
    m64 = copy.deepcopy(model).double()
    with torch.no_grad():
        feat, _ = m64.forward_with_features(x.double(), layer_id)
        flat = feat.flatten()
        out = []
        for i in coords:
            vals = []
            for s in (step, -step):
                f = flat.clone()
                f[i] += s
                logits = m64.forward_from(f.view_as(feat), layer_id)
                vals.append(logits.gather(1, y.view(-1, 1)).sum().item())
            out.append((vals[0] - vals[1]) / (2 * step))
    return np.array(out)


def relative_errors(a, b, floor_frac=1e-3):
    """|a-b| / max(|a|, |b|, floor_frac * max|a|)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    floor = max(floor_frac * np.abs(a).max(), 1e-12)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# Acceptance verdict lines, echoed again in the terminal summary.
ACCEPTANCE = {}
