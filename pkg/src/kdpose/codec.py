"""Belief-map / vector-field targets and the greedy keypoint parser.

Coordinates follow the pixel-centre convention: pixel ``(row r, col c)``
has centre ``(x=c, y=r)``. Quarter-resolution coordinates are input
coordinates divided by 4, which matches the sampling grid of two stride-2,
pad-1, 3x3 convolutions.

Channel layout for ``K`` keypoints and ``C`` classes:

* belief maps: channel ``c*K + k`` (``k = K-1`` is the centroid)
* vector fields: channels ``2*(c*(K-1) + j) + {0: dx, 1: dy}`` for vertex ``j``

Each nonzero field vector is the unit vector ``(x_vertex - x_centroid)``
normalised, i.e. pointing from the centroid towards the vertex; the parser
compares against the same direction so the two stay consistent.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError

K_DEFAULT = 9
STRIDE = 4
DEFAULT_SIGMA = 2.0
DEFAULT_RADIUS = 3.0
DEFAULT_PEAK_THRESHOLD = 0.3
DEFAULT_ANGLE_THRESHOLD = 30.0


class DegenerateGeometryWarning(RuntimeWarning):
    """A vertex coincides with its centroid, so its field channel stays zero."""


@dataclass
class Peak:
    location: np.ndarray  # (x, y) subpixel, quarter resolution
    confidence: float
    pixel: tuple[int, int]  # (row, col) of the integer maximum


@dataclass
class InstanceDetection:
    class_id: int
    centroid2d: np.ndarray
    centroid_confidence: float
    vertices2d: list  # 8 entries: None or (np.ndarray(x, y), confidence)

    @property
    def n_vertices(self) -> int:
        return sum(v is not None for v in self.vertices2d)

    @property
    def pnp_eligible(self) -> bool:
        return self.n_vertices >= 6

    def keypoints(self):
        """(9, 2) array with NaN for missing vertices, plus (9,) confidences."""
        pts = np.full((len(self.vertices2d) + 1, 2), np.nan)
        conf = np.zeros(len(self.vertices2d) + 1)
        for j, v in enumerate(self.vertices2d):
            if v is not None:
                pts[j], conf[j] = v
        pts[-1], conf[-1] = self.centroid2d, self.centroid_confidence
        return pts, conf


def _grid(out_shape):
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def encode_belief_maps(keypoints2d, class_ids, n_classes: int, out_shape, sigma: float = DEFAULT_SIGMA,
                       dtype=np.float32) -> np.ndarray:
    """Gaussian belief maps, ``(K*C, h, w)``; same-channel instances combine by max.

    ``keypoints2d`` is ``(n_instances, K, 2)`` in quarter-resolution pixels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kps = np.asarray(keypoints2d, dtype=np.float64).reshape(len(class_ids), -1, 2)
    n_kp = kps.shape[1] if len(kps) else K_DEFAULT
    maps = np.zeros((n_kp * n_classes, *out_shape), dtype=np.float64)
    xs, ys = _grid(out_shape)
    for inst, cls in zip(kps, class_ids):
        for k, (x, y) in enumerate(inst):
            g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2))
            ch = cls * n_kp + k
            np.maximum(maps[ch], g, out=maps[ch])
    return maps.astype(dtype)


def encode_vector_fields(vertices2d, centroids2d, class_ids, n_classes: int, out_shape,
                         radius: float = DEFAULT_RADIUS, dtype=np.float32, return_flags: bool = False):
    """Unit centroid-to-vertex vectors on disks around each vertex.

    ``vertices2d`` is ``(n_instances, K-1, 2)``, ``centroids2d`` is
    ``(n_instances, 2)``. Pixels within ``radius`` of a vertex (plus the
    pixel nearest the vertex) get the vector; where two instances' disks
    overlap in one channel the nearer vertex wins. A vertex equal to its
    centroid leaves its channel entry zero and raises a warning; with
    ``return_flags`` a ``(n_instances, K-1)`` boolean degeneracy array is
    returned as well.
    """
    verts = np.asarray(vertices2d, dtype=np.float64).reshape(len(class_ids), -1, 2)
    cents = np.asarray(centroids2d, dtype=np.float64).reshape(len(class_ids), 2)
    n_v = verts.shape[1] if len(verts) else K_DEFAULT - 1
    fields = np.zeros((n_v * 2 * n_classes, *out_shape), dtype=np.float64)
    best = np.full((n_v * n_classes, *out_shape), np.inf)
    flags = np.zeros((len(class_ids), n_v), dtype=bool)
    xs, ys = _grid(out_shape)
    h, w = out_shape
    for i, (inst, cen, cls) in enumerate(zip(verts, cents, class_ids)):
        for j, (x, y) in enumerate(inst):
            d = np.array([x - cen[0], y - cen[1]])
            norm = np.hypot(*d)
            if norm < 1e-12:
                flags[i, j] = True
                warnings.warn(f"instance {i} vertex {j} coincides with its centroid",
                              DegenerateGeometryWarning, stacklevel=2)
                continue
            v = d / norm
            dist = np.hypot(xs - x, ys - y)
            disk = dist <= radius
            r, c = int(np.rint(y)), int(np.rint(x))
            if 0 <= r < h and 0 <= c < w:
                disk[r, c] = True
            ch = cls * n_v + j
            win = disk & (dist < best[ch])
            best[ch][win] = dist[win]
            fields[2 * ch][win] = v[0]
            fields[2 * ch + 1][win] = v[1]
    fields = fields.astype(dtype)
    return (fields, flags) if return_flags else fields


def extract_peaks(belief: np.ndarray, threshold: float = DEFAULT_PEAK_THRESHOLD) -> list[Peak]:
    """Strict 3x3 local maxima at or above ``threshold``.

    Locations are refined by the intensity-weighted centroid of the 5x5
    window (clipped at the border). Sorted by confidence, highest first.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    b = np.asarray(belief, dtype=np.float64)
    h, w = b.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = b
    is_peak = b >= threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            is_peak &= b > padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    peaks = []
    for r, c in zip(*np.nonzero(is_peak)):
        r0, r1 = max(r - 2, 0), min(r + 3, h)
        c0, c1 = max(c - 2, 0), min(c + 3, w)
        win = b[r0:r1, c0:c1]
        total = win.sum()
        yy, xx = np.mgrid[r0:r1, c0:c1]
        loc = np.array([(win * xx).sum() / total, (win * yy).sum() / total])
        peaks.append(Peak(loc, float(b[r, c]), (int(r), int(c))))
    peaks.sort(key=lambda p: (-p.confidence, p.pixel))
    return peaks


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return np.inf
    return float(np.degrees(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0))))


def assemble_instances(peaks_per_channel, vector_fields: np.ndarray, class_id: int = 0,
                       angle_threshold: float = DEFAULT_ANGLE_THRESHOLD,
                       stride: int = STRIDE) -> list[InstanceDetection]:
    """Group one class's vertex peaks around its centroid peaks.

    ``peaks_per_channel`` has K lists, the last being the centroid.
    ``vector_fields`` holds this class's ``2*(K-1)`` channels. Vertices are
    visited in confidence order; each goes to the centroid whose direction
    deviates least from the predicted field vector, provided that angle is
    within ``angle_threshold`` and the instance has no vertex of that index
    yet. Output coordinates are scaled by ``stride`` to input resolution.
    """
    n_v = len(peaks_per_channel) - 1
    centroids = peaks_per_channel[-1]
    slots: list[list] = [[None] * n_v for _ in centroids]
    if centroids:
        cen_locs = np.array([p.location for p in centroids])
        candidates = [(p, j) for j in range(n_v) for p in peaks_per_channel[j]]
        candidates.sort(key=lambda pj: (-pj[0].confidence, pj[1], pj[0].pixel))
        h, w = vector_fields.shape[1:]
        for peak, j in candidates:
            r, c = peak.pixel
            vec = vector_fields[2 * j:2 * j + 2, r, c].astype(np.float64)
            angles = [_angle_deg(vec, peak.location - cl) for cl in cen_locs]
            best = int(np.argmin(angles))
            if angles[best] <= angle_threshold and slots[best][j] is None:
                slots[best][j] = (peak.location * stride, peak.confidence)
    return [InstanceDetection(class_id, cen.location * stride, cen.confidence, s)
            for cen, s in zip(centroids, slots)]


def decode(maps: np.ndarray, fields: np.ndarray, n_classes: int = 1, K: int = K_DEFAULT,
           peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
           angle_threshold: float = DEFAULT_ANGLE_THRESHOLD) -> list[InstanceDetection]:
    """Peaks per channel, then per-class assembly; returns input-resolution detections."""
    maps = np.asarray(maps)
    fields = np.asarray(fields)
    if maps.ndim != 3 or fields.ndim != 3:
        raise DimensionError("decode expects (channels, h, w) maps and fields")
    if maps.shape[0] != K * n_classes or fields.shape[0] != (K - 1) * 2 * n_classes:
        raise DimensionError(f"channel counts {maps.shape[0]}/{fields.shape[0]} inconsistent "
                             f"with K={K}, C={n_classes}")
    if maps.shape[1:] != fields.shape[1:]:
        raise DimensionError("belief maps and vector fields differ in spatial size")
    out = []
    for c in range(n_classes):
        peaks = [extract_peaks(maps[c * K + k], peak_threshold) for k in range(K)]
        fc = fields[c * (K - 1) * 2:(c + 1) * (K - 1) * 2]
        out.extend(assemble_instances(peaks, fc, c, angle_threshold))
    return out


def encode_targets(keypoints2d_input, class_ids, n_classes: int, input_shape,
                   sigma: float = DEFAULT_SIGMA, radius: float = DEFAULT_RADIUS, dtype=np.float32):
    """Both targets from input-resolution keypoints ``(n, K, 2)`` (centroid last)."""
    h, w = input_shape
    out_shape = (h // STRIDE, w // STRIDE)
    kq = np.asarray(keypoints2d_input, dtype=np.float64).reshape(len(class_ids), -1, 2) / STRIDE
    maps = encode_belief_maps(kq, class_ids, n_classes, out_shape, sigma, dtype)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGeometryWarning)
        fields = encode_vector_fields(kq[:, :-1], kq[:, -1], class_ids, n_classes, out_shape, radius, dtype)
    return maps, fields


def well_separated(keypoints2d_input, input_shape, min_distance: float = 6.0, border: float = 3.0) -> bool:
    """True when keypoints ``(n, K, 2)`` are pairwise >= ``min_distance`` apart and >= ``border``
    from the image edges, both in input-resolution pixels.

    Every generated label meeting this passes the encode/decode round trip.
    A vertex lying almost on its centroid is the case it rules out: the
    direction read from the field is then ill-defined.
    """
    kp = np.asarray(keypoints2d_input, dtype=np.float64).reshape(-1, 2)
    h, w = input_shape
    if kp.size and (kp.min() < border or kp[:, 0].max() > w - 1 - border or kp[:, 1].max() > h - 1 - border):
        return False
    d = np.linalg.norm(kp[:, None] - kp[None], axis=-1)
    return bool(np.all(d[np.triu_indices(len(kp), 1)] >= min_distance))
