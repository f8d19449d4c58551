"""Video-level AU aggregation, presence ratios, and mixed-effects
logistic regression with a per-patient random intercept.

The random-intercept integral is handled with a Laplace approximation:
per-patient conditional modes come from an inner Newton solve
(vectorized across patients), and the approximate marginal likelihood is
maximized over (beta, log sigma) with a quasi-Newton outer loop.
Significance is two-sided Wald from the observed-information inverse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .catalog import AU_IDS, au_index


class AssociationError(ValueError):
    pass


class SeparationError(AssociationError):
    pass


class AmbiguousVideoError(AssociationError):
    pass


# outcome coding per clinical contrast: (positive labels, negative labels)
CONTRASTS: dict[str, tuple[set[str], set[str]]] = {
    "pain": ({"high"}, {"low"}),
    "abd": ({"delirium", "coma"}, {"normal"}),
    "acuity": ({"unstable"}, {"stable"}),
}


@dataclass(frozen=True)
class Detection:
    frame_id: str
    video_id: str
    patient_id: str
    au: int
    probability: float


@dataclass
class VideoAggregate:
    video_id: str
    patient_id: str
    outcome: int
    au_predictors: dict[int, float]


@dataclass
class GLMMFit:
    predictor_aus: list[int]
    beta: np.ndarray  # intercept first, then one slope per predictor AU
    se: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    sigma: float
    loglik: float
    converged: bool


def presence_ratio(indicators: np.ndarray, aus: list[int],
                   classes: list[str]) -> dict[tuple[int, str], float]:
    """Detected-frame fraction per (AU, class).

    indicators: (frames, len(aus)) binary detections; classes assigns each
    frame to exactly one class.
    """
    indicators = np.asarray(indicators)
    classes = list(classes)
    if indicators.shape != (len(classes), len(aus)):
        raise AssociationError("indicator shape must be (frames, aus)")
    out = {}
    for cls in sorted(set(classes)):
        rows = np.array([c == cls for c in classes])
        if not rows.any():
            raise AssociationError(f"no frames in class {cls!r}")
        for j, au in enumerate(aus):
            out[(au, cls)] = float(indicators[rows, j].mean())
    return out


def aggregate_by_video(detections: list[Detection],
                       frame_times: dict[str, float],
                       intervals,
                       kind: str,
                       threshold: float = 0.5) -> list[VideoAggregate]:
    """Collapse frame detections into one data point per video.

    Each video gets, per AU, the fraction of its frames whose detection
    probability reaches the threshold, and the binary outcome of the
    phenotype intervals (of the requested kind) covering its frames.
    Videos whose frames span both outcome classes are rejected; videos
    with no labeled frames are dropped.
    """
    positive, negative = CONTRASTS[kind]
    per_video: dict[str, dict] = {}
    for det in detections:
        v = per_video.setdefault(det.video_id, {
            "patient_id": det.patient_id, "frames": {}, "aus": set()})
        if v["patient_id"] != det.patient_id:
            raise AssociationError(f"video {det.video_id!r} spans two patients")
        v["frames"].setdefault(det.frame_id, {})[det.au] = det.probability
        v["aus"].add(det.au)

    patient_intervals: dict[str, list] = {}
    for iv in intervals:
        if iv.kind == kind:
            patient_intervals.setdefault(iv.patient_id, []).append(iv)

    out = []
    for video_id in sorted(per_video):
        v = per_video[video_id]
        frames = v["frames"]
        classes = set()
        for frame_id in frames:
            ts = frame_times.get(frame_id)
            if ts is None:
                raise AssociationError(f"frame {frame_id!r} has no timestamp")
            for iv in patient_intervals.get(v["patient_id"], ()):
                if iv.start <= ts < iv.end:
                    if iv.label in positive:
                        classes.add(1)
                    elif iv.label in negative:
                        classes.add(0)
        if len(classes) > 1:
            raise AmbiguousVideoError(
                f"video {video_id!r} spans both {kind} classes; split it first")
        if not classes:
            continue
        predictors = {}
        for au in sorted(v["aus"], key=au_index):
            probs = [fr.get(au, 0.0) for fr in frames.values()]
            predictors[au] = float(np.mean([p >= threshold for p in probs]))
        out.append(VideoAggregate(video_id, v["patient_id"], classes.pop(),
                                  predictors))
    return out


# -- mixed-effects logistic fit ----------------------------------------------


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _conditional_modes(eta0, y, groups, n_groups, sig2, tol=1e-10, max_iter=100):
    """Newton solve for the per-patient random-intercept modes."""
    u = np.zeros(n_groups)
    for _ in range(max_iter):
        eta = eta0 + u[groups]
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = np.bincount(groups, weights=y - p, minlength=n_groups) - u / sig2
        curv = np.bincount(groups, weights=p * (1 - p), minlength=n_groups) + 1.0 / sig2
        u = u + grad / curv
        if np.abs(grad).max() <= tol:
            break
    eta = eta0 + u[groups]
    p = 1.0 / (1.0 + np.exp(-eta))
    w = np.bincount(groups, weights=p * (1 - p), minlength=n_groups)
    return u, w


def _neg_marginal_loglik(theta, X, y, groups, n_groups, sigma_fixed):
    p = X.shape[1]
    beta = theta[:p]
    eta0 = X @ beta
    if sigma_fixed is not None and sigma_fixed == 0.0:
        return float(-(y * eta0 - _softplus(eta0)).sum())
    sig2 = np.exp(2.0 * (np.log(sigma_fixed) if sigma_fixed is not None else theta[p]))
    u, w = _conditional_modes(eta0, y, groups, n_groups, sig2)
    eta = eta0 + u[groups]
    ll = (y * eta - _softplus(eta)).sum()
    ll -= (u**2).sum() / (2 * sig2)
    ll -= 0.5 * np.log(sig2 * w + 1.0).sum()
    return float(-ll)


def _numeric_hessian(f, x, step=1e-4):
    n = len(x)
    h = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = step
            ej[j] = step
            h[i, j] = h[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * step**2)
    return h


def fit_glmm(aggregates: list[VideoAggregate], included_aus,
             sigma_fixed: float | None = None) -> GLMMFit:
    """Fit logit P(y=1) = b0 + b.x + u_patient, u ~ N(0, sigma^2).

    sigma_fixed pins the random-intercept scale (0 gives an ordinary
    logistic regression). Raises SeparationError on degenerate outcomes
    or diverging coefficients.
    """
    if not aggregates:
        raise AssociationError("no video aggregates to fit")
    aus = sorted(included_aus, key=au_index)
    patients = sorted({a.patient_id for a in aggregates})
    if len(patients) < 2:
        raise AssociationError("need at least 2 patients")
    pat_index = {pid: i for i, pid in enumerate(patients)}
    X = np.array([[1.0] + [a.au_predictors.get(au, 0.0) for au in aus]
                  for a in aggregates])
    y = np.array([a.outcome for a in aggregates], dtype=np.float64)
    groups = np.array([pat_index[a.patient_id] for a in aggregates])
    if y.min() == y.max():
        raise SeparationError("outcome is constant across all videos")

    p = X.shape[1]
    free_sigma = sigma_fixed is None
    x0 = np.zeros(p + (1 if free_sigma else 0))  # log sigma starts at 0

    def objective(theta):
        return _neg_marginal_loglik(theta, X, y, groups, len(patients), sigma_fixed)

    res = minimize(objective, x0, method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 500})
    theta = res.x
    # BFGS with finite-difference gradients often stops on "precision loss"
    # once the true gradient is below the FD noise floor, which scales with
    # the objective; judge convergence by the gradient relative to that scale
    grad_tol = 1e-4 * max(1.0, abs(float(res.fun)))
    converged = bool(res.success) or float(np.abs(res.jac).max()) < grad_tol
    beta = theta[:p]
    if np.abs(beta).max() > 30:
        raise SeparationError("coefficients diverged; data are likely separable")
    sigma = (np.exp(theta[p]) if free_sigma else float(sigma_fixed))

    hess = _numeric_hessian(objective, theta)
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise AssociationError(f"singular observed information: {exc}") from exc
    diag = np.diag(cov)[:p]
    if (diag <= 0).any():
        raise AssociationError("observed information is not positive definite")
    se = np.sqrt(diag)
    z = beta / se
    p_values = 2.0 * (1.0 - norm.cdf(np.abs(z)))
    return GLMMFit(predictor_aus=list(aus), beta=beta, se=se, z=z,
                   p_values=p_values, sigma=float(sigma),
                   loglik=float(-res.fun), converged=converged)


def significance_report(fit: GLMMFit, alpha: float = 0.05
                        ) -> list[tuple[int, str, float, bool]]:
    """(au, sign, p, significant) per predictor, in catalog order."""
    if not fit.converged:
        raise AssociationError("cannot report significance from an unconverged fit")
    rows = []
    for i, au in enumerate(fit.predictor_aus):
        beta = fit.beta[i + 1]
        rows.append((au, "positive" if beta > 0 else "negative",
                     float(fit.p_values[i + 1]), bool(fit.p_values[i + 1] < alpha)))
    rows.sort(key=lambda r: au_index(r[0]))
    return rows


# -- file io ------------------------------------------------------------------


def read_detections(path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"frame_id", "video_id", "patient_id", "au", "probability"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise AssociationError(f"{path}: missing columns {sorted(missing)}")
        return [Detection(r["frame_id"], r["video_id"], r["patient_id"],
                          int(r["au"]), float(r["probability"]))
                for r in reader]


def write_detections(path, detections: list[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "video_id", "patient_id", "au", "probability"])
        for d in detections:
            writer.writerow([d.frame_id, d.video_id, d.patient_id, d.au,
                             repr(d.probability)])


def write_association_report(path, rows: list[dict]) -> None:
    """rows: contrast, au, beta, se, p, sign, significant."""
    cols = ["contrast", "au", "beta", "se", "p", "sign", "significant"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def write_presence_ratios(path, rows: list[dict]) -> None:
    cols = ["contrast", "class", "au", "ratio"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
