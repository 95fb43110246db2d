"""Ball-shaped convex domains.

All functions accept a single point of shape ``(d,)`` or a batch of shape
``(n, d)`` and return matching shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePoint, SchemaError

_DEGENERATE = 1e-12
_ROUNDING = 8 * np.finfo(float).eps


@dataclass(frozen=True)
class ConvexDomain:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise SchemaError(f"radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def dim(self) -> int:
        return len(self.center)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ConvexDomain":
        return cls(((lo + hi) / 2.0,), (hi - lo) / 2.0)

    @classmethod
    def from_config(cls, cfg: dict) -> "ConvexDomain":
        if cfg.get("shape") == "interval":
            lo, hi = cfg["bounds"]
            return cls.interval(float(lo), float(hi))
        if cfg.get("shape") != "ball":
            raise SchemaError(f"unsupported domain shape {cfg.get('shape')!r}")
        try:
            return cls(tuple(cfg["center"]), float(cfg["radius"]))
        except KeyError as exc:
            raise SchemaError(f"domain is missing key {exc}") from None

    def to_config(self) -> dict:
        return {"shape": "ball", "center": list(self.center), "radius": self.radius}

    def bounds(self) -> np.ndarray:
        c = np.asarray(self.center)
        return np.stack([c - self.radius, c + self.radius], axis=-1)

    # -- geometry --------------------------------------------------------

    def _offset(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - np.asarray(self.center)
        return diff, np.linalg.norm(diff, axis=-1)

    def psi(self, x):
        """Distance-like defining function: positive inside, zero on the sphere."""
        _, r = self._offset(x)
        return self.radius - r

    def rho(self, x):
        _, r = self._offset(x)
        return np.maximum(r - self.radius, 0.0) ** 2

    def grad_psi(self, x):
        diff, r = self._offset(x)
        if np.any(r < _DEGENERATE):
            raise DegeneratePoint("grad_psi is undefined at the center of the ball")
        return -diff / r[..., None] if diff.ndim > 1 else -diff / r

    def delta(self, x):
        """Penalization field, the gradient of rho; zero on the closed ball."""
        diff, r = self._offset(x)
        excess = np.maximum(r - self.radius, 0.0)
        safe = np.where(r > 0, r, 1.0)
        scale = 2.0 * excess / safe
        return diff * (scale[..., None] if diff.ndim > 1 else scale)

    def contains(self, x, tol: float = 0.0):
        return self.psi(x) >= -tol

    def project(self, x):
        """Euclidean projection onto the closed ball and the distance moved."""
        diff, r = self._offset(x)
        dist = np.maximum(r - self.radius, 0.0)
        # points already on the sphere up to rounding count as inside, so projection is idempotent
        outside = dist > _ROUNDING * self.radius
        dist = np.where(outside, dist, 0.0)
        safe = np.where(outside, r, 1.0)
        factor = np.where(outside, self.radius / safe, 1.0)
        proj = np.asarray(self.center) + diff * (factor[..., None] if diff.ndim > 1 else factor)
        x = np.asarray(x, dtype=float)
        proj = np.where(outside[..., None] if diff.ndim > 1 else outside, proj, x)
        return proj, dist
