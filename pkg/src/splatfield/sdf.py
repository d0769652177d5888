"""Neural signed distance field: ReLU MLP, sphere init, gradients, pulling.

The gradient of the field is built as an explicit forward expression (chain
of weight products with the ReLU activation pattern of the current forward
pass held constant).  Since a ReLU MLP is piecewise linear, those masks have
zero derivative almost everywhere, so the expression is exact a.e. and the
resulting gradient vector is itself differentiable with respect to the
network parameters.  That is what allows losses to look through the pulling
operation

    q' = q - f(q) * grad f(q) / |grad f(q)|

all the way into the network weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tape import Tape, TapeError, Value

GRAD_FLOOR = 1e-8  # below this gradient norm the pull is a no-op

_MAGIC = b"SPLATSDF"
_VERSION = 1


@dataclass
class SceneTransform:
    """Similarity mapping world coordinates into the normalized [-1,1]^3 cube.

    normalized = (world - offset) / scale
    """

    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_world(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) * self.scale + self.offset

    def to_normalized(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - self.offset) / self.scale


class SdfNetwork:
    """Fully connected ReLU MLP mapping a 3-vector position to a signed distance."""

    def __init__(self, weights, biases, seed: int = 0, radius: float = 0.5,
                 transform: SceneTransform | None = None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.seed = int(seed)
        self.radius = float(radius)
        self.transform = transform or SceneTransform()
        self.vanished_pulls = 0  # diagnostic counter, see pull()

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    # -- numpy fast paths ---------------------------------------------------

    def values(self, q: np.ndarray) -> np.ndarray:
        """Signed distances for an (N,3) batch (or a single 3-vector)."""
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        h = q.reshape(-1, 3)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        s = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return float(s[0]) if single else s

    def gradients(self, q: np.ndarray) -> np.ndarray:
        """Exact MLP Jacobian d f / d q for an (N,3) batch."""
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        h = q.reshape(-1, 3)
        masks = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            masks.append(z > 0)
            h = np.maximum(z, 0.0)
        u = np.broadcast_to(self.weights[-1][:, 0], h.shape).copy()
        for w, m in zip(reversed(self.weights[:-1]), reversed(masks)):
            u = (u * m) @ w.T
        return u[0] if single else u

    def pull(self, q: np.ndarray) -> np.ndarray:
        """Eq-style pull of points onto the zero-level set (numpy path).

        Points whose gradient norm falls below GRAD_FLOOR stay in place and
        are counted in `vanished_pulls`.
        """
        pulled, vanished = pull_points(self, q)
        self.vanished_pulls += int(vanished.sum())
        return pulled

    # -- tape graph builders --------------------------------------------------

    def register(self, tape: Tape, prefix: str = "sdf") -> dict:
        vals = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            vals[f"{prefix}.w{i}"] = tape.parameter(f"{prefix}.w{i}", w)
            vals[f"{prefix}.b{i}"] = tape.parameter(f"{prefix}.b{i}", b)
        return vals

    def eval_graph(self, tape: Tape, wvals: dict, q, prefix: str = "sdf"):
        """Forward expression; returns ((Q,) distances, activation masks)."""
        h = tape._coerce(q)
        if h.ndim != 2 or h.shape[1] != 3:
            raise TapeError(f"expected (N,3) query batch, got {h.shape}")
        masks = []
        n = self.n_layers
        for i in range(n - 1):
            z = tape.matmul(h, wvals[f"{prefix}.w{i}"]) + wvals[f"{prefix}.b{i}"]
            masks.append(z.data > 0)
            h = z.relu()
        s = tape.matmul(h, wvals[f"{prefix}.w{n-1}"]) + wvals[f"{prefix}.b{n-1}"]
        return s[:, 0], masks

    def grad_graph(self, tape: Tape, wvals: dict, masks, prefix: str = "sdf"):
        """Gradient of the field at the queries of a previous eval_graph call.

        The masks are constants of the pass; the result is a (Q,3) Value that
        remains differentiable with respect to the weights.
        """
        n = self.n_layers
        u = wvals[f"{prefix}.w{n-1}"][:, 0]  # (width,), broadcasts over queries
        for i in range(n - 2, -1, -1):
            u = tape.matmul(u * masks[i].astype(np.float64), wvals[f"{prefix}.w{i}"].T)
        return u

    def pull_graph(self, tape: Tape, wvals: dict, q, detach_direction: bool = False,
                   prefix: str = "sdf"):
        """Differentiable pull of a query batch onto the zero-level set.

        Returns (pulled (Q,3), distances (Q,), gradient (Q,3), valid mask).
        Queries with vanishing gradients are left untouched (mask 0).  With
        `detach_direction` the normalized gradient is treated as a constant
        (ablation switch); by default gradients flow through both the
        predicted distance and the direction.
        """
        qv = tape._coerce(q)
        s, masks = self.eval_graph(tape, wvals, qv, prefix=prefix)
        g = self.grad_graph(tape, wvals, masks, prefix=prefix)
        norms = g.norm(axis=1, keepdims=True)
        valid = (norms.data[:, 0] > GRAD_FLOOR).astype(np.float64)
        direction = g / tape.clamp_min(norms, GRAD_FLOOR)
        if detach_direction:
            direction = direction.detach()
        step = s.reshape((-1, 1)) * direction
        pulled = qv - step * valid[:, None]
        return pulled, s, g, valid


# ---------------------------------------------------------------------------
# sphere initialization
# ---------------------------------------------------------------------------

def init_sphere(layers: int = 4, width: int = 128, radius: float = 0.5,
                seed: int = 0) -> SdfNetwork:
    """Geometrically initialize an MLP so that f(q) approximates |q| - radius.

    Hidden weights ~ N(0, sqrt(2/out)); the output layer starts at the
    sqrt(pi/in) mean that realizes the norm under ReLU statistics and is then
    refit by least squares against |q| - radius on a seeded sample, which
    makes the approximation tight for any seed.  Deterministic per seed.
    """
    if layers < 2:
        raise ValueError(f"need at least 2 layers, got {layers}")
    if width < 8:
        raise ValueError(f"width must be >= 8, got {width}")
    if not (0.0 < radius < 1.0):
        raise ValueError(f"radius must be in (0, 1), got {radius}")
    rng = np.random.default_rng(seed)
    dims = [3] + [width] * (layers - 1) + [1]
    weights, biases = [], []
    for i in range(layers):
        din, dout = dims[i], dims[i + 1]
        if i == layers - 1:
            w = rng.normal(np.sqrt(np.pi) / np.sqrt(din), 1e-5, size=(din, dout))
            b = np.full(dout, -radius)
        else:
            w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(dout), size=(din, dout))
            b = np.zeros(dout)
        weights.append(w)
        biases.append(b)
    net = SdfNetwork(weights, biases, seed=seed, radius=radius)
    # output-layer refit against the target sphere
    pts = rng.uniform(-1.0, 1.0, size=(4096, 3))
    h = pts
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
    target = np.linalg.norm(pts, axis=1) - radius
    a = np.concatenate([h, np.ones((len(h), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(a, target, rcond=1e-8)
    net.weights[-1] = sol[:-1][:, None]
    net.biases[-1] = sol[-1:]
    return net


# ---------------------------------------------------------------------------
# pulling for arbitrary fields
# ---------------------------------------------------------------------------

def pull_points(field, q: np.ndarray, grad_floor: float = GRAD_FLOOR):
    """Pull points onto the zero-level set of any field with values/gradients.

    Returns (pulled points, vanished mask).  Rows whose gradient norm is at
    or below `grad_floor` are returned unchanged and flagged.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    pts = q.reshape(-1, 3)
    s = field.values(pts)
    g = field.gradients(pts)
    norms = np.linalg.norm(g, axis=1)
    vanished = norms <= grad_floor
    safe = np.where(vanished, 1.0, norms)
    pulled = pts - np.where(vanished[:, None], 0.0, s[:, None]) * g / safe[:, None]
    if single:
        return pulled[0], vanished[0]
    return pulled, vanished


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

class SdfFormatError(ValueError):
    """Malformed network checkpoint."""


def save_network(net: SdfNetwork, path) -> None:
    """Documented binary checkpoint.

    Little endian: 8-byte magic ``SPLATSDF``, uint32 version, int64 seed,
    float64 radius, float64 transform scale, 3 float64 transform offset,
    uint32 layer-size count, layer sizes as uint32, then per layer the
    row-major float64 weight matrix followed by the bias vector.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Iq", _VERSION, net.seed))
        f.write(struct.pack("<5d", net.radius, net.transform.scale,
                            *net.transform.offset))
        sizes = net.layer_sizes
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(net.weights, net.biases):
            f.write(w.astype("<f8").tobytes())
            f.write(b.astype("<f8").tobytes())


def load_network(path) -> SdfNetwork:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise SdfFormatError(f"{path}: bad magic at byte 0")
    off = 8
    version, seed = struct.unpack_from("<Iq", raw, off)
    off += 12
    if version != _VERSION:
        raise SdfFormatError(f"{path}: unsupported version {version}")
    radius, scale, ox, oy, oz = struct.unpack_from("<5d", raw, off)
    off += 40
    (nsizes,) = struct.unpack_from("<I", raw, off)
    off += 4
    sizes = struct.unpack_from(f"<{nsizes}I", raw, off)
    off += 4 * nsizes
    weights, biases = [], []
    for i in range(nsizes - 1):
        din, dout = sizes[i], sizes[i + 1]
        need = (din * dout + dout) * 8
        if off + need > len(raw):
            raise SdfFormatError(f"{path}: truncated at byte {len(raw)}")
        w = np.frombuffer(raw, dtype="<f8", count=din * dout, offset=off)
        off += din * dout * 8
        b = np.frombuffer(raw, dtype="<f8", count=dout, offset=off)
        off += dout * 8
        weights.append(w.reshape(din, dout).copy())
        biases.append(b.copy())
    if off != len(raw):
        raise SdfFormatError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    return SdfNetwork(weights, biases, seed=seed, radius=radius,
                      transform=SceneTransform(scale, np.array([ox, oy, oz])))
