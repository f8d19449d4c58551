"""Face alignment: similarity-transform estimation from 5-point landmarks
and bilinear warp into a canonical crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AlignmentError(ValueError):
    pass


# Canonical 5-point template (left eye, right eye, nose tip, mouth corners)
# as fractions of the output size; the widely used frontal-face layout.
TEMPLATE_FRACTIONS = np.array([
    [0.34191, 0.46157],
    [0.65653, 0.45983],
    [0.50022, 0.64050],
    [0.37097, 0.82469],
    [0.63151, 0.82325],
])


def template_landmarks(out_size: int) -> np.ndarray:
    return TEMPLATE_FRACTIONS * out_size


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    theta: float
    tx: float
    ty: float
    residual: float = 0.0

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix mapping source to destination points."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([
            [self.scale * c, -self.scale * s, self.tx],
            [self.scale * s, self.scale * c, self.ty],
            [0.0, 0.0, 1.0],
        ])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SimilarityTransform":
        if self.scale <= 0:
            raise AlignmentError("transform is not invertible (scale <= 0)")
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.theta), np.sin(-self.theta)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_scale, -self.theta, tx, ty)


def estimate_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform taking src points onto dst.

    Closed form from the cross-covariance of the centered point sets
    (Umeyama). Requires at least two distinct source points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or src.shape[0] < 2:
        raise AlignmentError(f"need matching Nx2 point sets with N >= 2, got {src.shape}")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise AlignmentError("landmarks must be finite")

    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = (sc**2).sum() / len(src)
    if var_s < 1e-12:
        raise AlignmentError("degenerate landmarks: source points coincide")

    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    s_diag = np.array([1.0, sign])
    rot = u @ np.diag(s_diag) @ vt
    scale = (d * s_diag).sum() / var_s
    theta = float(np.arctan2(rot[1, 0], rot[0, 0]))
    t = mu_d - scale * rot @ mu_s
    tf = SimilarityTransform(float(scale), theta, float(t[0]), float(t[1]))
    residual = float(np.sqrt(((tf.apply(src) - dst) ** 2).sum(axis=1).mean()))
    return SimilarityTransform(tf.scale, tf.theta, tf.tx, tf.ty, residual)


def warp_crop(image: np.ndarray, transform: SimilarityTransform, out_size: int) -> np.ndarray:
    """Resample into an out_size x out_size crop; output pixel (u, v) reads the
    source at transform^-1(u, v) with bilinear interpolation, zero outside."""
    if out_size <= 0:
        raise AlignmentError("out_size must be positive")
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w, c = image.shape

    inv = transform.inverse()
    vv, uu = np.meshgrid(np.arange(out_size), np.arange(out_size), indexing="ij")
    # pixel coordinates are (x, y) = (column, row)
    coords = inv.apply(np.stack([uu.ravel(), vv.ravel()], axis=1))
    x, y = coords[:, 0], coords[:, 1]

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0

    def sample(xi, yi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros((len(xi), c))
        out[inside] = image[yi[inside], xi[inside]]
        return out

    val = (sample(x0, y0) * ((1 - fx) * (1 - fy))[:, None]
           + sample(x0 + 1, y0) * (fx * (1 - fy))[:, None]
           + sample(x0, y0 + 1) * ((1 - fx) * fy)[:, None]
           + sample(x0 + 1, y0 + 1) * (fx * fy)[:, None])
    out = val.reshape(out_size, out_size, c)
    return out[:, :, 0] if squeeze else out


def align_face(image: np.ndarray, landmarks: np.ndarray, out_size: int) -> np.ndarray:
    """Estimate landmark->template similarity and warp into the crop."""
    tf = estimate_similarity(np.asarray(landmarks), template_landmarks(out_size))
    return warp_crop(image, tf, out_size)
