"""3D Gaussian primitives: parameterization, covariance, density, normals, I/O.

Scales are stored as logarithms and opacity as a logit so every attribute is
unconstrained under gradient descent while scales stay positive and opacity
stays in (0,1).  Rotations are unit quaternions (w, x, y, z); they are
renormalized after each optimizer step and additionally normalized on the
tape wherever a rotation matrix is built, so gradients with respect to the
raw quaternion are always well defined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tape import Tape, Value

# L_Thin drives one variance to zero; this floor keeps the covariance
# inverse (and with it the disk-pull loss) well posed.
VARIANCE_FLOOR = 1e-8

_MAGIC = b"SPLATGS\x00"
_VERSION = 1
_RECORD = struct.Struct("<14d")  # center 3, log_scales 3, quat 4, logit 1, color 3


@dataclass
class Gaussian:
    """One learnable splat: center, per-axis log scales, rotation, opacity, color."""

    center: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.rotation = self.rotation / np.linalg.norm(self.rotation)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def variances(self) -> np.ndarray:
        return np.exp(2.0 * self.log_scales)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class PulledGaussian:
    """A Gaussian projected onto the SDF zero-level set.

    Shares every attribute with its source except the center.
    """

    source_index: int
    center: np.ndarray


class GaussianSet:
    """Growable, array-backed collection of Gaussians.

    Attribute arrays are the optimization parameters; `grad_accum` and
    `hit_count` collect per-Gaussian screen-space gradient statistics between
    densification events and are reset after each densify/prune.
    """

    def __init__(self, centers, log_scales, rotations, opacity_logits, colors):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.reset_stats()

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        if not gaussians:
            return cls.empty()
        return cls(np.stack([g.center for g in gaussians]),
                   np.stack([g.log_scales for g in gaussians]),
                   np.stack([g.rotation for g in gaussians]),
                   np.array([g.opacity_logit for g in gaussians]),
                   np.stack([g.color for g in gaussians]))

    def __len__(self) -> int:
        return len(self.centers)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.centers[i], self.log_scales[i], self.rotations[i],
                        float(self.opacity_logits[i]), self.colors[i])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def reset_stats(self):
        n = len(self.centers)
        self.grad_accum = np.zeros(n)
        self.hit_count = np.zeros(n, dtype=np.int64)

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= np.maximum(norms, 1e-12)

    def copy(self) -> "GaussianSet":
        out = GaussianSet(self.centers.copy(), self.log_scales.copy(),
                          self.rotations.copy(), self.opacity_logits.copy(),
                          self.colors.copy())
        out.grad_accum = self.grad_accum.copy()
        out.hit_count = self.hit_count.copy()
        return out

    def select(self, mask_or_idx) -> "GaussianSet":
        return GaussianSet(self.centers[mask_or_idx], self.log_scales[mask_or_idx],
                           self.rotations[mask_or_idx],
                           self.opacity_logits[mask_or_idx], self.colors[mask_or_idx])

    def append(self, other: "GaussianSet"):
        self.centers = np.concatenate([self.centers, other.centers])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.rotations = np.concatenate([self.rotations, other.rotations])
        self.opacity_logits = np.concatenate([self.opacity_logits, other.opacity_logits])
        self.colors = np.concatenate([self.colors, other.colors])
        self.reset_stats()


# ---------------------------------------------------------------------------
# rotation helpers
# ---------------------------------------------------------------------------

def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit-quaternion (w,x,y,z) to rotation matrix; batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_matrix_graph(tape: Tape, quat: Value) -> Value:
    """Rotation matrix (3,3) from a raw quaternion Value (4,), normalized on tape."""
    qn = quat.normalize(axis=0)
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    two = 2.0
    entries = [
        1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y),
    ]
    return tape.stack(entries, axis=0).reshape((3, 3))


def rotation_entries_graph(tape: Tape, quats: Value) -> list:
    """Vectorized rotation entries from raw quaternions (N,4).

    Returns nine (N,) Values in row-major order R00..R22.
    """
    qn = quats.normalize(axis=1)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    two = 2.0
    return [
        1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y),
    ]


# ---------------------------------------------------------------------------
# covariance / density / normal
# ---------------------------------------------------------------------------

def covariance(g: Gaussian) -> np.ndarray:
    """Sigma = R diag(scales^2) R^T, symmetric positive definite."""
    r = quat_to_rotation(g.rotation)
    return (r * g.variances) @ r.T


def covariance_graph(tape: Tape, log_scales: Value, quat: Value) -> Value:
    r = rotation_matrix_graph(tape, quat)
    var = (log_scales * 2.0).exp()
    return tape.matmul(r * var, r.T)


def density3d(g: Gaussian, q: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 (q-mu)^T Sigma^-1 (q-mu)).

    The inverse uses a variance floor so disk-shaped Gaussians stay finite.
    """
    r = quat_to_rotation(g.rotation)
    d = np.asarray(q, dtype=np.float64).reshape(3) - g.center
    local = r.T @ d
    m = np.sum(local * local / (g.variances + VARIANCE_FLOOR))
    return float(np.exp(-0.5 * m))


def density3d_graph(tape: Tape, center: Value, log_scales: Value, quat: Value,
                    q) -> Value:
    r = rotation_matrix_graph(tape, quat)
    d = tape._coerce(q) - center
    local = tape.matmul(r.T, d)
    inv_var = 1.0 / ((log_scales * 2.0).exp() + VARIANCE_FLOOR)
    m = (local * local * inv_var).sum()
    return (m * -0.5).exp()


def disk_normal(g: Gaussian) -> np.ndarray:
    """Unit normal of the Gaussian disk: rotation column of the minimal scale.

    The argmin axis is discrete (ties go to the lowest index) and is treated
    as a constant of the current step; gradients flow through the rotation.
    """
    axis = int(np.argmin(g.log_scales))
    return quat_to_rotation(g.rotation)[:, axis]


def disk_normal_graph(tape: Tape, log_scales: Value, quat: Value) -> Value:
    axis = int(np.argmin(log_scales.data))
    r = rotation_matrix_graph(tape, quat)
    return r[:, axis]


def disk_axes(log_scales: np.ndarray) -> np.ndarray:
    """Per-Gaussian argmin scale axis for a (N,3) log-scale array."""
    return np.argmin(log_scales, axis=1)


def disk_normals_graph(tape: Tape, log_scales_data: np.ndarray, quats: Value) -> list:
    """Vectorized disk normals as three (N,) Values (nx, ny, nz).

    The axis selection comes from the current log-scale data and is constant
    for the pass.
    """
    r = rotation_entries_graph(tape, quats)
    axes = disk_axes(log_scales_data)
    m = [(axes == k).astype(np.float64) for k in range(3)]
    nx = r[0] * m[0] + r[1] * m[1] + r[2] * m[2]
    ny = r[3] * m[0] + r[4] * m[1] + r[5] * m[2]
    nz = r[6] * m[0] + r[7] * m[1] + r[8] * m[2]
    return [nx, ny, nz]


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

class GaussianSetFormatError(ValueError):
    """Malformed Gaussian-set checkpoint; message names the byte offset."""


def save_set(gset: GaussianSet, path) -> None:
    """Write the documented binary checkpoint.

    Layout (little endian): 8-byte magic ``SPLATGS\\0``, uint32 version,
    uint64 count, then per Gaussian 14 float64: center (3), log_scales (3),
    quaternion (4), opacity logit (1), color (3).
    """
    n = len(gset)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, n))
        records = np.concatenate([
            gset.centers, gset.log_scales, gset.rotations,
            gset.opacity_logits[:, None], gset.colors,
        ], axis=1)
        f.write(records.astype("<f8").tobytes())


def load_set(path) -> GaussianSet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise GaussianSetFormatError(f"{path}: bad magic at byte 0")
    if len(raw) < 20:
        raise GaussianSetFormatError(f"{path}: truncated header at byte {len(raw)}")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != _VERSION:
        raise GaussianSetFormatError(f"{path}: unsupported version {version} at byte 8")
    need = 20 + n * _RECORD.size
    if len(raw) != need:
        raise GaussianSetFormatError(
            f"{path}: expected {need} bytes, file ends at byte {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", count=n * 14, offset=20)
    body = body.reshape(n, 14).copy()  # frombuffer views are read-only
    return GaussianSet(body[:, 0:3], body[:, 3:6], body[:, 6:10],
                       body[:, 10], body[:, 11:14])
