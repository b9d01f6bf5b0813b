"""Flattened Gaussian primitives and the full-precision integrate-and-fire gate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

QUAT_TOL = 1e-6
LOCAL_THRESHOLD_EPS = 1e-4
GLOBAL_THRESHOLD_BOUNDS = (1e-4, 0.99)


@dataclass(frozen=True)
class SurrogateConfig:
    """Triangular surrogate window: half-width ``k`` and gain ``lam``."""

    k: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        if not (self.k > 0 and self.lam > 0):
            raise ValueError(f"surrogate k and lam must be > 0, got k={self.k}, lam={self.lam}")


@dataclass
class GlobalThresholds:
    """The single opacity cutoff shared by every primitive."""

    opacity: float = 0.005

    def clamp(self):
        lo, hi = GLOBAL_THRESHOLD_BOUNDS
        self.opacity = float(np.clip(self.opacity, lo, hi))
        return self


@dataclass
class FlattenedGaussian:
    """One surfel-like primitive. ``rotation`` is a (w, x, y, z) quaternion."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    local_threshold: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(2)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class GaussianSet:
    """Struct-of-arrays container for N flattened Gaussians.

    Opacity is held as an unbounded logit; ``opacities`` applies the sigmoid.
    Arrays keep whatever float dtype they were given (the trainer stores
    float32, the gradient checks use float64).
    """

    FIELDS = ("means", "scales", "quats", "opacity_logits", "colors", "local_thresholds")

    def __init__(self, means, scales, quats, opacity_logits, colors, local_thresholds=None):
        self.means = np.asarray(means)
        n = self.means.shape[0]
        self.scales = np.asarray(scales)
        self.quats = np.asarray(quats)
        self.opacity_logits = np.asarray(opacity_logits)
        self.colors = np.asarray(colors)
        if local_thresholds is None:
            local_thresholds = np.zeros(n, dtype=self.means.dtype)
        self.local_thresholds = np.asarray(local_thresholds)
        shapes = {
            "means": (n, 3),
            "scales": (n, 2),
            "quats": (n, 4),
            "opacity_logits": (n,),
            "colors": (n, 3),
            "local_thresholds": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def empty(cls, dtype=np.float64):
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0, 2), z(0, 4), z(0), z(0, 3), z(0))

    @classmethod
    def from_primitives(cls, prims, dtype=np.float64):
        prims = list(prims)
        if not prims:
            return cls.empty(dtype)
        a = lambda xs: np.asarray(xs, dtype=dtype)  # noqa: E731
        return cls(
            a([g.center for g in prims]),
            a([g.scale for g in prims]),
            a([g.rotation for g in prims]),
            a([logit(np.clip(g.opacity, 1e-12, 1 - 1e-12)) for g in prims]),
            a([g.color for g in prims]),
            a([g.local_threshold for g in prims]),
        )

    def __len__(self):
        return self.means.shape[0]

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def primitive(self, i):
        return FlattenedGaussian(
            self.means[i], self.scales[i], self.quats[i], float(self.opacities[i]),
            self.colors[i], float(self.local_thresholds[i]),
        )

    def copy(self):
        return GaussianSet(*(getattr(self, f).copy() for f in self.FIELDS))

    def astype(self, dtype):
        return GaussianSet(*(getattr(self, f).astype(dtype) for f in self.FIELDS))

    def subset(self, idx):
        return GaussianSet(*(getattr(self, f)[idx] for f in self.FIELDS))

    def concat(self, other):
        return GaussianSet(
            *(np.concatenate([getattr(self, f), getattr(other, f).astype(getattr(self, f).dtype)])
              for f in self.FIELDS)
        )

    def arrays(self):
        return {f: getattr(self, f) for f in self.FIELDS}


# ---------------------------------------------------------------------------
# rotation / covariance
# ---------------------------------------------------------------------------

def quat_to_rotmat(q):
    """Rotation matrices from (..., 4) quaternions (w, x, y, z); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def _check_unit(r):
    n = np.linalg.norm(r, axis=-1)
    if np.any(np.abs(n - 1.0) > QUAT_TOL):
        raise ValueError(f"quaternion is not unit length (|r| = {n})")


def covariance(scale, rotation):
    """Rank-2 covariance ``R diag(Sx^2, Sy^2, 0) R^T``. Broadcasts over leading dims."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scales must be positive")
    _check_unit(rotation)
    R = quat_to_rotmat(rotation)
    a, b = R[..., :, 0], R[..., :, 1]
    sx2 = scale[..., 0, None, None] ** 2
    sy2 = scale[..., 1, None, None] ** 2
    return sx2 * a[..., :, None] * a[..., None, :] + sy2 * b[..., :, None] * b[..., None, :]


def eval_gaussian(g: FlattenedGaussian, x, plane_tol=1e-9):
    """Evaluate the flattened Gaussian at ``x`` using the in-plane pseudo-inverse.

    Points off the support plane return 0.
    """
    if np.any(g.scale <= 0):
        raise ValueError("degenerate scale")
    _check_unit(g.rotation)
    R = quat_to_rotmat(g.rotation)
    d = np.asarray(x, dtype=np.float64) - g.center
    local = R.T @ d
    if abs(local[2]) > plane_tol * max(1.0, float(np.linalg.norm(d))):
        return 0.0
    m = (local[0] / g.scale[0]) ** 2 + (local[1] / g.scale[1]) ** 2
    return float(np.exp(-0.5 * m))


def normal_of(g: FlattenedGaussian, camera_center=None):
    """Unit normal (the zero-scale axis). Flipped to face ``camera_center`` if given."""
    n = quat_to_rotmat(g.rotation)[:, 2]
    if camera_center is not None:
        to_cam = np.asarray(camera_center, dtype=np.float64) - g.center
        if n @ to_cam < 0:
            n = -n
    return n


# ---------------------------------------------------------------------------
# FIF neuron
# ---------------------------------------------------------------------------

def fif_forward(I, V):
    """Pass ``I`` through where ``I >= V``, zero elsewhere."""
    I = np.asarray(I, dtype=np.float64)
    out = np.where(I < V, 0.0, I)
    return out if out.ndim else float(out)


def surrogate_window(I, V, cfg: SurrogateConfig):
    """``lam * I * max(0, (k - |I - V|) / k^2)``: the threshold-side surrogate."""
    I = np.asarray(I, dtype=np.float64)
    return cfg.lam * I * np.maximum(0.0, (cfg.k - np.abs(I - V)) / (cfg.k * cfg.k))


def fif_backward(I, V, upstream, cfg: SurrogateConfig = SurrogateConfig()):
    """Surrogate gradients ``(dI, dV)`` of the gate for an upstream gradient."""
    I = np.asarray(I, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    s = (I >= V).astype(np.float64)
    dI = up * s
    dV = up * surrogate_window(I, V, cfg)
    if dI.ndim == 0:
        return float(dI), float(dV)
    return dI, dV
