"""Geometry and rendering loss terms for the joint optimization.

All terms are built on the tape so their gradients reach both the Gaussian
attributes and, through the pulling operation, the SDF network weights.
Reductions over Gaussians or queries are means, which keeps the balance
weights meaningful while densification changes the primitive count.  The
disk-pull term is the negative logarithm of the Gaussian membership
probability (a Mahalanobis quadratic form); the raw exponential form is
exposed for inspection only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussians import VARIANCE_FLOOR, GaussianSet, disk_normals_graph
from .sdf import GRAD_FLOOR
from .tape import Tape, TapeError, Value


@dataclass
class LossWeights:
    """Balance weights of the total objective (eikonal is an ablation, default off)."""

    alpha: float = 100.0   # thin-disk
    beta: float = 0.1      # tangent alignment
    gamma: float = 1.0     # disk pull
    delta: float = 0.1     # orthogonal pull direction
    eikonal: float = 0.0


@dataclass
class LossReport:
    """Per-term scalar values and the weighted total for one iteration."""

    splatting: float = 0.0
    thin: float = 0.0
    tangent: float = 0.0
    pull: float = 0.0
    orthogonal: float = 0.0
    eikonal: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("iteration", "splatting", "thin", "tangent", "pull",
                  "orthogonal", "eikonal", "total", "wall_time")

    @staticmethod
    def csv_header() -> str:
        return ",".join(LossReport.CSV_FIELDS)

    def csv_row(self, iteration: int, wall_time: float) -> str:
        vals = [self.splatting, self.thin, self.tangent, self.pull,
                self.orthogonal, self.eikonal, self.total]
        return ",".join([str(iteration)] + [repr(v) for v in vals] + [f"{wall_time:.6f}"])

    def weighted_total(self, w: LossWeights) -> float:
        return (self.splatting + w.alpha * self.thin + w.beta * self.tangent
                + w.gamma * self.pull + w.delta * self.orthogonal
                + w.eikonal * self.eikonal)


# ---------------------------------------------------------------------------
# thin-disk term
# ---------------------------------------------------------------------------

def loss_thin_graph(tape: Tape, log_scales: Value) -> Value:
    """Mean over Gaussians of the smallest per-axis variance."""
    var = (log_scales * 2.0).exp()
    m = tape.minimum(tape.minimum(var[:, 0], var[:, 1]), var[:, 2])
    return m.mean()


def loss_thin(gset: GaussianSet) -> float:
    if len(gset) == 0:
        import warnings
        warnings.warn("thin loss over an empty Gaussian set is 0")
        return 0.0
    return float(np.exp(2.0 * np.min(gset.log_scales, axis=1)).mean())


# ---------------------------------------------------------------------------
# nearest pulled Gaussian
# ---------------------------------------------------------------------------

class SpatialGrid:
    """Uniform hash grid over points for exact nearest-neighbor queries.

    Queries expand Chebyshev rings of cells around the query cell (clamped
    into the occupied bounding box, which keeps far-away queries cheap and
    preserves the distance bound: ring r holds no point closer than
    (r-1) * cell).  Ties resolve toward the lowest point index.
    """

    def __init__(self, points: np.ndarray, cell: float | None = None):
        self.points = np.asarray(points, dtype=np.float64)
        n = len(self.points)
        if n == 0:
            raise ValueError("empty point set")
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        extent = float(np.max(hi - lo))
        if cell is None:  # aim for a few points per occupied cell
            cell = max(extent / max(round((n / 3.0) ** (1.0 / 3.0)), 1), 1e-6)
        self.cell = float(cell)
        self.origin = lo
        self.cells: dict = {}
        keys = np.floor((self.points - lo) / self.cell).astype(np.int64)
        self._kmin = keys.min(axis=0)
        self._kmax = keys.max(axis=0)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)

    def nearest(self, q: np.ndarray) -> int:
        q = np.asarray(q, dtype=np.float64)
        raw = np.floor((q - self.origin) / self.cell).astype(np.int64)
        c0 = np.clip(raw, self._kmin, self._kmax)
        span = int(np.max(np.maximum(c0 - self._kmin, self._kmax - c0)))
        best_d2 = math.inf
        best_idx = -1
        for r in range(span + 1):
            if best_idx >= 0 and (r - 1) * self.cell > math.sqrt(best_d2):
                break
            for key in self._shell(int(c0[0]), int(c0[1]), int(c0[2]), r):
                idxs = self.cells.get(key)
                if not idxs:
                    continue
                pts = self.points[idxs]
                d2 = np.sum((pts - q) ** 2, axis=1)
                k = int(np.argmin(d2))
                cand_d2, cand_idx = float(d2[k]), idxs[k]
                ties = np.where(d2 == cand_d2)[0]
                if len(ties) > 1:  # lowest index wins inside the cell too
                    cand_idx = min(idxs[t] for t in ties)
                if cand_d2 < best_d2 or (cand_d2 == best_d2 and cand_idx < best_idx):
                    best_d2, best_idx = cand_d2, cand_idx
        return best_idx

    def _shell(self, cx, cy, cz, r):
        if r == 0:
            yield (cx, cy, cz)
            return
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) == r:
                        yield (cx + dx, cy + dy, cz + dz)

    def nearest_batch(self, queries: np.ndarray) -> np.ndarray:
        """Nearest index per query row, vectorized.

        Queries sharing a cell share one 27-cell candidate neighborhood; a
        query is certified when its best candidate lies within one cell size
        (nothing outside the neighborhood can be closer), otherwise it falls
        back to the exact ring search.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if len(self.points) * len(queries) <= 2 ** 24:
            # small problems: one exact BLAS scan beats walking cells
            return _scan_chunked(queries, self.points)
        out = np.empty(len(queries), dtype=np.int64)
        keys = np.clip(np.floor((queries - self.origin) / self.cell).astype(np.int64),
                       self._kmin, self._kmax)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        cell2 = self.cell * self.cell
        leftover = []
        start = 0
        while start < len(order):
            key = tuple(keys[order[start]])
            stop = start
            while stop < len(order) and tuple(keys[order[stop]]) == key:
                stop += 1
            rows = order[start:stop]
            start = stop
            cand: list = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        cand.extend(self.cells.get(
                            (key[0] + dx, key[1] + dy, key[2] + dz), ()))
            if cand:
                cand = np.array(sorted(cand), dtype=np.int64)
                q = queries[rows]
                d2 = np.sum((q[:, None, :] - self.points[cand][None, :, :]) ** 2,
                            axis=2)
                best = np.argmin(d2, axis=1)  # first minimum: lowest index wins
                best_d2 = d2[np.arange(len(rows)), best]
                out[rows] = cand[best]
                leftover.append(rows[best_d2 >= cell2])
            else:
                leftover.append(rows)
        pending = np.concatenate(leftover) if leftover else np.zeros(0, np.int64)
        if len(pending):  # complete with an exact chunked scan
            out[pending] = _scan_chunked(queries[pending], self.points)
        return out


def nearest_pulled_scan(q: np.ndarray, pulled_centers: np.ndarray) -> int:
    """Linear-scan reference: index of the closest center, ties to lowest index."""
    d2 = np.sum((pulled_centers - np.asarray(q)) ** 2, axis=1)
    return int(np.lexsort((np.arange(len(d2)), d2))[0])


def _scan_chunked(queries: np.ndarray, points: np.ndarray,
                  chunk: int = 512) -> np.ndarray:
    """Vectorized exact scan (argmin keeps the lowest index on ties)."""
    out = np.empty(len(queries), dtype=np.int64)
    p2 = np.einsum("ij,ij->i", points, points)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = p2[None, :] - 2.0 * (q @ points.T)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def nearest_pulled(queries: np.ndarray, pulled_centers: np.ndarray,
                   grid: SpatialGrid | None = None) -> np.ndarray:
    """Nearest pulled-Gaussian index per query (grid accelerated)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if grid is None:
        grid = SpatialGrid(pulled_centers)
    return grid.nearest_batch(queries)


# ---------------------------------------------------------------------------
# disk pull / tangent / orthogonal terms
# ---------------------------------------------------------------------------

def _gather_disk_frame(tape: Tape, gvals: dict, assign: np.ndarray):
    quats = tape.take(gvals["quats"], assign, axis=0)
    logs = tape.take(gvals["log_scales"], assign, axis=0)
    return quats, logs


def loss_pull_graph(tape: Tape, pulled_queries: Value, assign: np.ndarray,
                    pulled_centers: Value, gvals: dict) -> Value:
    """Negative log probability of each pulled query under its assigned disk.

    0.5 * (q' - mu)^T Sigma^-1 (q' - mu) in the disk frame, averaged over the
    batch; Sigma uses the shared source covariance with the variance floor.
    """
    from .gaussians import rotation_entries_graph

    mu = tape.take(pulled_centers, assign, axis=0)
    quats, logs = _gather_disk_frame(tape, gvals, assign)
    r = rotation_entries_graph(tape, quats)
    d = pulled_queries - mu
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    total = None
    for k in range(3):
        e = r[k] * dx + r[3 + k] * dy + r[6 + k] * dz
        inv_var = 1.0 / ((logs[:, k] * 2.0).exp() + VARIANCE_FLOOR)
        term = e * e * inv_var
        total = term if total is None else total + term
    return (total * 0.5).mean()


def pull_probability(e: np.ndarray, variances: np.ndarray) -> float:
    """The raw exponential membership probability (inspection only)."""
    return float(np.exp(-0.5 * np.sum(e * e / (variances + VARIANCE_FLOOR))))


def loss_pull_centers_graph(tape: Tape, pulled_queries: Value, assign: np.ndarray,
                            pulled_centers: Value) -> Value:
    """Pull-to-centers ablation: 0.5 |q' - mu|^2 averaged over the batch."""
    mu = tape.take(pulled_centers, assign, axis=0)
    d = pulled_queries - mu
    return ((d * d).sum(axis=1) * 0.5).mean()


def _alignment_mean(tape: Tape, grads: Value, nx, ny, nz) -> Value:
    """Mean of 1 - |cos angle(grad, n)| over rows with usable gradients."""
    norms = grads.norm(axis=1, keepdims=True)
    valid = (norms.data[:, 0] > GRAD_FLOOR).astype(np.float64)
    unit = grads / tape.clamp_min(norms, GRAD_FLOOR)
    cos = unit[:, 0] * nx + unit[:, 1] * ny + unit[:, 2] * nz
    terms = (1.0 - cos.abs()) * valid
    denom = max(float(valid.sum()), 1.0)
    return terms.sum() / denom


def loss_tangent_graph(tape: Tape, grads_at_pulled: Value, gvals: dict) -> Value:
    """Tangent alignment of every disk with the field normal at its pulled center."""
    nx, ny, nz = disk_normals_graph(tape, gvals["log_scales"].data, gvals["quats"])
    return _alignment_mean(tape, grads_at_pulled, nx, ny, nz)


def loss_orthogonal_graph(tape: Tape, grads_at_queries: Value, assign: np.ndarray,
                          gvals: dict) -> Value:
    """Alignment of the field gradient at each query with its target disk normal."""
    nx, ny, nz = disk_normals_graph(tape, gvals["log_scales"].data, gvals["quats"])
    nxs = tape.take(nx, assign)
    nys = tape.take(ny, assign)
    nzs = tape.take(nz, assign)
    return _alignment_mean(tape, grads_at_queries, nxs, nys, nzs)


def loss_eikonal_graph(tape: Tape, grads_at_queries: Value) -> Value:
    """Mean squared deviation of the gradient norm from one (ablation term)."""
    n = grads_at_queries.norm(axis=1)
    d = n - 1.0
    return (d * d).mean()


# ---------------------------------------------------------------------------
# image terms: SSIM and the splatting loss
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def _ssim_window_for(shape) -> int:
    # shrink to the largest odd window that fits small images
    w = min(SSIM_WINDOW, shape[0], shape[1])
    return w if w % 2 == 1 else w - 1


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid window positions, per channel.

    Gaussian window (11x11, sigma 1.5 on large images), C1=0.01^2, C2=0.03^2
    on a [0,1] dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    from scipy import signal
    k = _ssim_kernel(_ssim_window_for(a.shape), SSIM_SIGMA)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = signal.correlate2d(x, k, mode="valid")
        my = signal.correlate2d(y, k, mode="valid")
        sxx = signal.correlate2d(x * x, k, mode="valid") - mx * mx
        syy = signal.correlate2d(y * y, k, mode="valid") - my * my
        sxy = signal.correlate2d(x * y, k, mode="valid") - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def ssim_graph(tape: Tape, img: Value, ref: np.ndarray) -> Value:
    """Differentiable SSIM of a rendered image against a constant reference."""
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise TapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    k = _ssim_kernel(_ssim_window_for(img.shape), SSIM_SIGMA)
    from scipy import signal
    chans = []
    for ch in range(img.shape[2]):
        x = img[:, :, ch]
        y = ref[:, :, ch]
        mx = tape.conv2d_valid(x, k)
        my = signal.correlate2d(y, k, mode="valid")
        sxx = tape.conv2d_valid(x * x, k) - mx * mx
        syy = signal.correlate2d(y * y, k, mode="valid") - my * my
        sxy = tape.conv2d_valid(x * y, k) - mx * my
        num = (mx * my * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        chans.append((num / den).mean())
    out = chans[0]
    for c in chans[1:]:
        out = out + c
    return out / float(len(chans))


def loss_splatting_graph(tape: Tape, img: Value, ref: np.ndarray) -> Value:
    """0.8 * L1 + 0.2 * D-SSIM between the rendered and ground-truth images."""
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise TapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    l1 = (img - ref).abs().mean()
    dssim = (1.0 - ssim_graph(tape, img, ref)) * 0.5
    return l1 * 0.8 + dssim * 0.2


def loss_splatting(rendered: np.ndarray, gt: np.ndarray) -> float:
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {gt.shape}")
    l1 = float(np.mean(np.abs(rendered - gt)))
    return 0.8 * l1 + 0.2 * (1.0 - ssim(rendered, gt)) / 2.0


def total_graph(tape: Tape, weights: LossWeights, splatting: Value | None = None,
                thin: Value | None = None, tangent: Value | None = None,
                pull: Value | None = None, orthogonal: Value | None = None,
                eikonal: Value | None = None):
    """Weighted sum of the present terms; returns (total Value, LossReport)."""
    zero = tape.constant(0.0)
    terms = {
        "splatting": splatting if splatting is not None else zero,
        "thin": thin if thin is not None else zero,
        "tangent": tangent if tangent is not None else zero,
        "pull": pull if pull is not None else zero,
        "orthogonal": orthogonal if orthogonal is not None else zero,
        "eikonal": eikonal if eikonal is not None else zero,
    }
    total = (terms["splatting"] + terms["thin"] * weights.alpha
             + terms["tangent"] * weights.beta + terms["pull"] * weights.gamma
             + terms["orthogonal"] * weights.delta
             + terms["eikonal"] * weights.eikonal)
    report = LossReport(
        splatting=float(terms["splatting"].data), thin=float(terms["thin"].data),
        tangent=float(terms["tangent"].data), pull=float(terms["pull"].data),
        orthogonal=float(terms["orthogonal"].data),
        eikonal=float(terms["eikonal"].data), total=float(total.data))
    return total, report
