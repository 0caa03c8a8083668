"""Independent reference implementations used only by the tests.

Each oracle takes a different route from the library code: explicit Python
loops, quaternions from scipy, brute-force enumeration.
"""
import math

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection
from scipy.spatial.transform import Rotation


def naive_log_softmax(row):
    m = max(row)
    total = sum(math.exp(v - m) for v in row)
    return [v - m - math.log(total) for v in row]


def naive_cross_entropy(pred, target, mask=None):
    """Mean over selected points of -sum_axis sum_k t_k log p_k, by loops."""
    n = len(pred)
    mask = [True] * n if mask is None else list(mask)
    total, count = 0.0, 0
    for i in range(n):
        if not mask[i]:
            continue
        count += 1
        for a in range(3):
            logp = naive_log_softmax(list(pred[i][a]))
            total -= sum(t * lp for t, lp in zip(target[i][a], logp))
    return total / count


def naive_entropy(logits):
    out = []
    for point in logits:
        h = 0.0
        for row in point:
            for lp in naive_log_softmax(list(row)):
                h -= math.exp(lp) * lp
        out.append(h)
    return np.array(out)


def rotation_angle_deg(a, b) -> float:
    """Geodesic angle via quaternions of the relative rotation."""
    return math.degrees(Rotation.from_matrix(np.asarray(a) @ np.asarray(b).T).magnitude())


def symmetric_angle_deg(a, b, axis=2, samples=3600) -> float:
    """Minimum over sampled spins of ``b`` about its own axis."""
    best = math.inf
    unit = np.eye(3)[axis]
    for theta in np.linspace(0.0, 2 * math.pi, samples, endpoint=False):
        spin = Rotation.from_rotvec(theta * unit).as_matrix()
        best = min(best, rotation_angle_deg(a, np.asarray(b) @ spin))
    return best


def kabsch_similarity(src, dst):
    """Similarity fit through scipy's rotation alignment and a moment ratio."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    sc = src - src.mean(0)
    dc = dst - dst.mean(0)
    rot, _ = Rotation.align_vectors(dc, sc)
    r = rot.as_matrix()
    scale = np.sum(dc * (sc @ r.T)) / np.sum(sc * sc)
    t = dst.mean(0) - scale * r @ src.mean(0)
    return r, t, scale


def brute_force_ap(tp_flags, n_gt):
    """Enumerate every cut of the ranked list and integrate the envelope.

    For each distinct recall level reached, the interpolated precision is the
    best precision at any cut with recall at least that level.
    """
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    cuts = []
    for k in range(1, len(tp_flags) + 1):
        tp = sum(1 for f in tp_flags[:k] if f)
        cuts.append((tp / n_gt, tp / k))
    levels = sorted({r for r, _ in cuts})
    ap, prev = 0.0, 0.0
    for r in levels:
        p = max(pk for rk, pk in cuts if rk >= r)
        ap += (r - prev) * p
        prev = r
    return ap


def aabb_iou(center_a, size_a, center_b, size_b) -> float:
    """Exact IoU of two axis-aligned boxes."""
    ca, sa, cb, sb = (np.asarray(x, float) for x in (center_a, size_a, center_b, size_b))
    lo = np.maximum(ca - sa / 2, cb - sb / 2)
    hi = np.minimum(ca + sa / 2, cb + sb / 2)
    inter = np.prod(np.clip(hi - lo, 0.0, None))
    return float(inter / (np.prod(sa) + np.prod(sb) - inter))


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


def _box_halfspaces(center, rot, size):
    rows = []
    for k in range(3):
        n = np.asarray(rot, float)[:, k]
        rows.append(np.r_[n, -(n @ center) - size[k] / 2])
        rows.append(np.r_[-n, n @ center - size[k] / 2])
    return rows


def polytope_box_iou(center_a, rot_a, size_a, center_b, rot_b, size_b) -> float:
    """Exact IoU of two oriented boxes: half-space intersection volume via scipy."""
    ca, cb, sa, sb = (np.asarray(x, float) for x in (center_a, center_b, size_a, size_b))
    hs = np.array(_box_halfspaces(ca, rot_a, sa) + _box_halfspaces(cb, rot_b, sb))
    a, b = hs[:, :3], -hs[:, 3]
    # Chebyshev center: an interior point with the largest clearance
    lp = linprog(np.r_[0, 0, 0, -1], A_ub=np.c_[a, np.linalg.norm(a, axis=1)], b_ub=b, bounds=[(None, None)] * 3 + [(0, None)])
    inter = 0.0
    if lp.x[3] > 1e-9:
        inter = ConvexHull(HalfspaceIntersection(hs, lp.x[:3]).intersections).volume
    return float(inter / (np.prod(sa) + np.prod(sb) - inter))
