"""Regression PointNet predicting developmental stage from a centroid cloud.

Layout (no batch norm, no dropout)::

    input transform net (3x3) -> shared MLP 3-64-64
    -> feature transform net (64x64) -> shared MLP 64-64-128-1024
    -> max over points -> FC 1024-512-256-1 (linear output, hours)

Both transform nets use a shared MLP 64-128-1024, max pooling and FC 512-256
ending in a k*k layer that starts at zero weights with an identity bias, so a
fresh model applies identity transforms. The regression layer starts at zero
weights and bias, so a fresh model predicts 0.0 for any cloud.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# name, (fan_in, fan_out), relu after it
_TNET = [("mlp1", 64), ("mlp2", 128), ("mlp3", 1024)]
_TNET_FC = [("fc1", 512), ("fc2", 256)]
_MLP_A = [("mlp_a1", 64), ("mlp_a2", 64)]
_MLP_B = [("mlp_b1", 64), ("mlp_b2", 128), ("mlp_b3", 1024)]
_HEAD = [("head1", 512), ("head2", 256)]


@dataclass(frozen=True)
class NormalizationSpec:
    """``center`` subtracts the centroid; ``center_scale`` also divides by ``scale`` (um)."""

    mode: str = "center_scale"
    scale: float = 350.0

    def __post_init__(self):
        if self.mode not in ("center", "center_scale"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if self.mode == "center_scale" and not self.scale > 0:
            raise ValueError("normalization scale must be positive")

    def apply(self, cloud: np.ndarray) -> np.ndarray:
        out = cloud - cloud.mean(axis=0)
        return out / self.scale if self.mode == "center_scale" else out


@dataclass(frozen=True)
class AugmentConfig:
    rotation: bool = True
    jitter_sigma: float = 0.002  # normalized units
    jitter_clip: float = 0.01

    def __post_init__(self):
        if not self.jitter_clip >= self.jitter_sigma >= 0:
            raise ValueError("need jitter_clip >= jitter_sigma >= 0")


class PointNetRegressor:
    def __init__(self, seed: int = 0, ortho_weight: float = 0.001):
        self.ortho_weight = ortho_weight
        self.params: Dict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        self._tnet_params("tnet3", 3, 3, rng)
        self._chain("", _MLP_A, 3, rng)
        self._tnet_params("tnet64", 64, 64, rng)
        self._chain("", _MLP_B, 64, rng)
        self._chain("", _HEAD, 1024, rng)
        self._add("head3", 256, 1, rng, zero=True)

    # -- parameters ------------------------------------------------------

    def _add(self, name, fan_in, fan_out, rng, zero=False, bias=None):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out) if bias is None else np.asarray(bias, dtype=np.float64)
        self.params[f"{name}.W"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(b, requires_grad=True)

    def _chain(self, prefix, layers, fan_in, rng):
        for name, width in layers:
            self._add(prefix + name, fan_in, width, rng)
            fan_in = width
        return fan_in

    def _tnet_params(self, prefix, fan_in, k, rng):
        width = self._chain(prefix + ".", _TNET, fan_in, rng)
        width = self._chain(prefix + ".", _TNET_FC, width, rng)
        self._add(prefix + ".out", width, k * k, rng, zero=True, bias=np.eye(k).ravel())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    # -- forward ---------------------------------------------------------

    def _dense(self, x, name, act=True):
        y = ad.add(ad.matmul(x, self.params[f"{name}.W"]), self.params[f"{name}.b"])
        return ad.relu(y) if act else y

    def _run(self, x, prefix, layers):
        for name, _ in layers:
            x = self._dense(x, prefix + name)
        return x

    def tnet(self, x, prefix: str, k: int) -> Tensor:
        """Predict a k x k transform from an (n, c) point/feature matrix."""
        h = self._run(x, prefix + ".", _TNET)
        g, _ = ad.max_over_points(h)
        g = ad.reshape(g, (1, -1))
        g = self._run(g, prefix + ".", _TNET_FC)
        return ad.reshape(self._dense(g, prefix + ".out", act=False), (k, k))

    def forward_full(self, cloud) -> Tuple[Tensor, Tensor, Tensor]:
        """Return ``(prediction, input transform, feature transform)``."""
        x = ad.as_tensor(cloud)
        if x.data.ndim != 2 or x.shape[1] != 3:
            raise ad.ShapeError(f"expected an (n, 3) cloud, got {x.shape}")
        t3 = self.tnet(x, "tnet3", 3)
        x = ad.matmul(x, t3)
        f = self._run(x, "", _MLP_A)
        t64 = self.tnet(f, "tnet64", 64)
        f = ad.matmul(f, t64)
        f = self._run(f, "", _MLP_B)
        g, _ = ad.max_over_points(f)
        g = self._run(ad.reshape(g, (1, -1)), "", _HEAD)
        out = self._dense(g, "head3", act=False)
        return ad.reshape(out, ()), t3, t64

    def forward(self, cloud) -> Tensor:
        return self.forward_full(cloud)[0]

    def predict(self, cloud) -> float:
        with ad.no_grad():
            return self.forward(cloud).item()

    def loss(self, clouds, targets) -> Tuple[Tensor, Tensor]:
        """MSE over a batch plus the feature-transform orthogonality penalty.

        Returns ``(total, mse)``.
        """
        preds, penalties = [], []
        for cloud in clouds:
            pred, _, t64 = self.forward_full(cloud)
            preds.append(pred)
            if self.ortho_weight:
                penalties.append(orthogonality_penalty(t64))
        mse = ad.mse_loss(ad.stack(preds), Tensor(np.asarray(targets, dtype=np.float64)))
        if not penalties:
            return mse, mse
        reg = ad.mul(ad.mean(ad.stack(penalties)), self.ortho_weight)
        return ad.add(mse, reg), mse


def orthogonality_penalty(t: Tensor) -> Tensor:
    """Squared Frobenius norm of ``I - T T^T``."""
    diff = ad.sub(np.eye(t.shape[0]), ad.matmul(t, ad.transpose(t)))
    return ad.sum(ad.mul(diff, diff))


# -- data handling -------------------------------------------------------


def sample_points(points, count: int = 4096, seed=None) -> np.ndarray:
    """Uniform subsample; without replacement when enough points exist."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty frame")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=n < count)
    return points[idx]


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed proper rotation (unit quaternion method)."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud, cfg: AugmentConfig, seed=None) -> np.ndarray:
    """Rotate the whole cloud about the origin, then add clipped Gaussian jitter."""
    rng = np.random.default_rng(seed)
    out = np.asarray(cloud, dtype=np.float64)
    if cfg.rotation:
        out = out @ random_rotation(rng).T
    if cfg.jitter_sigma > 0:
        out = out + np.clip(rng.normal(scale=cfg.jitter_sigma, size=out.shape), -cfg.jitter_clip, cfg.jitter_clip)
    return out


@dataclass
class EnsemblePrediction:
    mean: float
    runs: np.ndarray

    @property
    def std(self) -> float:
        return float(np.std(self.runs))


def predict_ensemble(model: PointNetRegressor, points, runs: int = 25, seed=None, sample_size: int = 4096,
                     norm: NormalizationSpec = NormalizationSpec()) -> EnsemblePrediction:
    """Average of ``runs`` forward passes on independent random subsamples."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    rng = np.random.default_rng(seed)
    preds = np.empty(runs)
    for i in range(runs):
        cloud = norm.apply(sample_points(points, sample_size, rng))
        preds[i] = model.predict(cloud)
    return EnsemblePrediction(float(np.mean(preds)), preds)


def config_dict(obj) -> dict:
    return asdict(obj)
