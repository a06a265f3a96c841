"""Vector-decomposed disentanglement of backbone features.

The domain-invariant part ``F_di`` comes from a small conv extractor and the
domain-specific part is defined as the remainder ``F_ds = F_b - F_di``.
A domain classifier reads ``F_ds``; an orthogonal loss pushes RoI-pooled
``F_di`` and ``F_ds`` vectors apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .detection.layers import FEATURE_CHANNELS
from .detection.roi_align import apply_interpolation, interpolation_matrix

LOGIT_CLAMP = 15.0
NORM_EPS = 1e-8
# E_DIR starts as identity plus this fraction of the default random init
DIR_INIT_RESIDUAL = 0.25


class DIRExtractor(nn.Module):
    """Three 3x3 convs (ReLU after the first two, linear last); shape preserving.

    Each conv is initialised as a Dirac identity plus a scaled-down default
    init, so F_di starts near F_b (the input is non-negative, so the ReLUs
    pass it through) and F_ds starts small but nonzero.
    """

    def __init__(self, channels: int = FEATURE_CHANNELS, residual: float = DIR_INIT_RESIDUAL):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                noise = conv.weight * residual
                nn.init.dirac_(conv.weight)
                conv.weight += noise
                conv.bias.mul_(residual)

    def forward(self, f_b: torch.Tensor) -> torch.Tensor:
        if f_b.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f_b.shape[-3]}")
        x = F.relu(self.conv1(f_b))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


def extract_dir(extractor: DIRExtractor, f_b: torch.Tensor) -> torch.Tensor:
    return extractor(f_b)


# The remainder is formed one precision up: the difference of two float32
# values is exact in float64, so F_di + F_ds gives back F_b bit for bit.
_WIDER = {torch.float16: torch.float32, torch.bfloat16: torch.float32, torch.float32: torch.float64}


def difference_decompose(f_b: torch.Tensor, f_di: torch.Tensor) -> torch.Tensor:
    if f_b.shape != f_di.shape:
        raise ValueError(f"shape mismatch {tuple(f_b.shape)} vs {tuple(f_di.shape)}")
    wide = _WIDER.get(f_b.dtype, f_b.dtype)
    return f_b.to(wide) - f_di.to(wide)


@dataclass
class FeatureBundle:
    f_b: torch.Tensor
    f_di: torch.Tensor
    f_ds: torch.Tensor

    @classmethod
    def decompose(cls, f_b: torch.Tensor, extractor: DIRExtractor) -> "FeatureBundle":
        f_di = extractor(f_b)
        return cls(f_b, f_di, difference_decompose(f_b, f_di))


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ValueError("GRL coefficient must be non-negative")
    return _GradReverse.apply(x, lam)


@dataclass
class DomainPrediction:
    logit: torch.Tensor  # clamped to +-LOGIT_CLAMP
    label: int

    @property
    def d_hat(self) -> torch.Tensor:
        return torch.sigmoid(self.logit)


class DomainClassifier(nn.Module):
    """Global average pool, then FC 64 -> 64 -> 64 -> 1 with ReLUs in between.

    ``grl_lambda`` set to a number inserts gradient reversal before the pool.
    """

    def __init__(self, channels: int = FEATURE_CHANNELS, hidden: int = 64, grl_lambda: float | None = None):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        self.grl_lambda = grl_lambda

    def forward(self, f_ds: torch.Tensor) -> torch.Tensor:
        if self.grl_lambda is not None:
            f_ds = grl(f_ds, self.grl_lambda)
        x = f_ds.mean(dim=(-2, -1)).to(self.fc1.weight.dtype)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x).squeeze(-1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def domain_classify(classifier: DomainClassifier, f_ds: torch.Tensor, label: int) -> DomainPrediction:
    if label not in (0, 1):
        raise ValueError("domain label must be 0 (source) or 1 (target)")
    return DomainPrediction(classifier(f_ds), label)


def domain_loss(pred: DomainPrediction) -> torch.Tensor:
    # -[D log s(z) + (1 - D) log(1 - s(z))] written in terms of the logit
    z = pred.logit
    return (F.softplus(z) - pred.label * z).mean()


def bce_from_probability(label: int, d_hat: float) -> float:
    """Scalar domain loss from a probability; used for analytic checks."""
    return -(label * math.log(d_hat) + (1 - label) * math.log(1 - d_hat))


def pool_proposals(aligned: torch.Tensor) -> torch.Tensor:
    if aligned.shape[0] == 0:
        raise ValueError("no proposals to pool")
    return aligned.mean(dim=(-2, -1))


@dataclass
class PooledPair:
    a_di: torch.Tensor
    a_ds: torch.Tensor
    p_di: torch.Tensor
    p_ds: torch.Tensor

    @classmethod
    def from_features(cls, f_di, f_ds, proposals, output_size: int = 7, spatial_scale: float = 1 / 8):
        if len(proposals) == 0:
            raise ValueError("no proposals to align")
        # one interpolation matrix serves both maps
        mat = interpolation_matrix(proposals, f_di.shape[-2], f_di.shape[-1], output_size, spatial_scale,
                                   dtype=f_di.dtype)
        a_di = apply_interpolation(f_di, mat, output_size)
        a_ds = apply_interpolation(f_ds.to(mat.dtype), mat, output_size)
        return cls(a_di, a_ds, pool_proposals(a_di), pool_proposals(a_ds))


def orthogonal_loss(p_di: torch.Tensor, p_ds: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Mean absolute cosine similarity between paired rows of ``p_di`` and ``p_ds``.

    With ``literal=True`` rows are squared elementwise instead of L2
    normalised, giving ``mean_i |sum_j p_di[i,j]^2 * p_ds[i,j]^2|``.
    """
    if p_di.shape != p_ds.shape:
        raise ValueError(f"shape mismatch {tuple(p_di.shape)} vs {tuple(p_ds.shape)}")
    if p_di.shape[0] == 0:
        raise ValueError("orthogonal loss needs at least one proposal")
    if literal:
        m = p_di.pow(2) * p_ds.pow(2)
    else:
        # clamping the norm (rather than adding eps) keeps exact scale invariance
        m = (p_di / p_di.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)) * (p_ds / p_ds.norm(dim=1, keepdim=True).clamp_min(NORM_EPS))
    return m.sum(dim=1).abs().mean()


class BaseAligner(nn.Module):
    """Pixel-level domain discriminator behind a GRL, in the style of SW's local alignment.

    Two 1x1 convs and a sigmoid score every location of the map as source
    (0) or target (1); the loss is the mean squared error to the domain
    label, which stays bounded however large the features grow.
    """

    def __init__(self, channels: int = FEATURE_CHANNELS, hidden: int = 64, grl_lambda: float = 1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)
        self.grl_lambda = grl_lambda

    def forward(self, fmap: torch.Tensor, label: int) -> torch.Tensor:
        x = grl(fmap, self.grl_lambda).to(self.conv1.weight.dtype)
        d = torch.sigmoid(self.conv2(F.relu(self.conv1(x))))
        return 0.5 * ((d - label) ** 2).mean()
