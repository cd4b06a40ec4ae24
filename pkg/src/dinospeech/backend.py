"""Scoring and classification back-ends: cosine, PCA, PLDA, logistic regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

NORM_FLOOR = 1e-12
JITTER = 1e-8


def cosine_score(e1, e2) -> float:
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    n1 = max(np.linalg.norm(e1), NORM_FLOOR)
    n2 = max(np.linalg.norm(e2), NORM_FLOOR)
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def cosine_scores(enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Row-wise cosine between paired enrollment/test matrices."""
    a = enroll / np.maximum(np.linalg.norm(enroll, axis=1, keepdims=True), NORM_FLOOR)
    b = test / np.maximum(np.linalg.norm(test, axis=1, keepdims=True), NORM_FLOOR)
    return np.clip(np.sum(a * b, axis=1), -1.0, 1.0)


# --- PCA ---------------------------------------------------------------------------


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (D, dim), orthonormal columns
    variances: np.ndarray


def pca_fit(x, dim: int) -> PCAModel:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= dim <= min(n - 1, d):
        raise ValueError(f"PCA dim {dim} must be in [1, min(n-1, D)] = [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(d, d)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dim]
    vals, vecs = vals[order], vecs[:, order]
    # sign convention: largest-magnitude entry of each component is positive
    pivot = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(dim)]
    vecs = vecs * np.where(pivot < 0, -1.0, 1.0)
    return PCAModel(mean, vecs, np.maximum(vals, 0.0))


def pca_transform(model: PCAModel, e) -> np.ndarray:
    return (np.asarray(e, dtype=np.float64) - model.mean) @ model.components


def pca_inverse(model: PCAModel, z) -> np.ndarray:
    return np.asarray(z) @ model.components.T + model.mean


# --- PLDA --------------------------------------------------------------------------


@dataclass
class PLDAModel:
    mu: np.ndarray
    V: np.ndarray  # (D, q)
    Sw: np.ndarray

    @property
    def Sb(self) -> np.ndarray:
        return self.V @ self.V.T

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("plda 1\n")
            _write_blocks(fh, (("mu", self.mu[None, :]), ("V", self.V), ("Sw", self.Sw)))

    @classmethod
    def load(cls, path) -> "PLDAModel":
        with open(path) as fh:
            if fh.readline().split()[:1] != ["plda"]:
                raise ValueError(f"{path}: not a PLDA model file")
            blocks = _read_blocks(fh)
        return cls(blocks["mu"][0], blocks["V"], blocks["Sw"])


def _write_blocks(fh, items) -> None:
    from .formats import fmt

    for name, w in items:
        fh.write(f"{name} {w.shape[0]} {w.shape[1]}\n")
        for row in w:
            fh.write(" ".join(fmt(v) for v in row) + "\n")


def _read_blocks(fh) -> dict:
    blocks = {}
    for line in fh:
        if not line.strip():
            continue
        name, r, c = line.split()
        rows = [np.array(fh.readline().split(), dtype=np.float64) for _ in range(int(r))]
        blocks[name] = np.array(rows).reshape(int(r), int(c))
    return blocks


def _spd(m: np.ndarray) -> np.ndarray:
    """Symmetrize; add jitter only if a Cholesky factorization fails."""
    m = 0.5 * (m + m.T)
    try:
        np.linalg.cholesky(m)
        return m
    except np.linalg.LinAlgError:
        m = m + JITTER * np.eye(len(m)) * max(1.0, np.trace(m) / len(m))
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("within-class covariance is singular") from exc
        return m


def _group(x, labels):
    labels = np.asarray(labels)
    keys, inv = np.unique(labels, return_inverse=True)
    return [x[inv == k] for k in range(len(keys))]


def plda_loglik(model: PLDAModel, x, labels) -> float:
    """Marginal log-likelihood of the data, speaker factors integrated out.

    Uses the per-speaker Woodbury form; see the tests for an independent
    dense-covariance check.
    """
    x = np.asarray(x, dtype=np.float64) - model.mu
    d, q = model.V.shape
    sw_inv = np.linalg.inv(model.Sw)
    _, logdet_sw = np.linalg.slogdet(model.Sw)
    vt_swi = model.V.T @ sw_inv
    vt_swi_v = vt_swi @ model.V
    total = 0.0
    for g in _group(x, labels):
        n = len(g)
        p = np.eye(q) + n * vt_swi_v
        _, logdet_p = np.linalg.slogdet(p)
        f = vt_swi @ g.sum(axis=0)
        quad = np.einsum("ij,jk,ik->", g, sw_inv, g) - f @ np.linalg.solve(p, f)
        total += -0.5 * (n * d * np.log(2 * np.pi) + n * logdet_sw + logdet_p + quad)
    return float(total)


def plda_init(x, labels, q: int, init: str = "pca") -> PLDAModel:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    mu = x.mean(axis=0)
    groups = _group(x - mu, labels)
    within = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups) / len(x)
    if init == "zero":
        total = (x - mu).T @ (x - mu) / len(x)
        return PLDAModel(mu, np.zeros((d, q)), _spd(total))
    means = np.array([g.mean(axis=0) for g in groups])
    between = means.T @ means / len(means)
    vals, vecs = np.linalg.eigh(between)
    order = np.argsort(vals)[::-1][:q]
    v = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    return PLDAModel(mu, v, _spd(within))


def plda_em_step(model: PLDAModel, x, labels) -> PLDAModel:
    """One EM iteration for V and S_W (mu fixed at the data mean)."""
    x = np.asarray(x, dtype=np.float64) - model.mu
    d, q = model.V.shape
    sw_inv = np.linalg.inv(model.Sw)
    vt_swi = model.V.T @ sw_inv
    vt_swi_v = vt_swi @ model.V
    xy = np.zeros((d, q))
    ryy = np.zeros((q, q))
    for g in _group(x, labels):
        n = len(g)
        s = g.sum(axis=0)
        p_inv = np.linalg.inv(np.eye(q) + n * vt_swi_v)
        ey = p_inv @ (vt_swi @ s)
        eyy = p_inv + np.outer(ey, ey)
        xy += np.outer(s, ey)
        ryy += n * eyy
    v_new = np.linalg.solve(ryy.T, xy.T).T
    sw_new = (x.T @ x - v_new @ xy.T) / len(x)
    return PLDAModel(model.mu, v_new, _spd(sw_new))


def plda_fit(x, labels, q: int, n_iter: int = 20, init: str = "pca", return_trace: bool = False):
    """EM fit of the eigen-voice PLDA model ``w = mu + V y + eps``.

    With ``return_trace`` the per-iteration models are returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n_spk = len(np.unique(labels))
    if n_spk < 2:
        raise ValueError("PLDA needs at least two speakers")
    if q > x.shape[1]:
        raise ValueError("q must not exceed the embedding dimension")
    model = plda_init(x, labels, q, init)
    trace = [model]
    for _ in range(n_iter):
        model = plda_em_step(model, x, labels)
        trace.append(model)
    return (model, trace) if return_trace else model


@dataclass
class PLDAScorer:
    """Precomputed two-covariance LLR quadratic form."""

    mu: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    const: float

    @classmethod
    def from_model(cls, model: PLDAModel) -> "PLDAScorer":
        sb, sw = model.Sb, model.Sw
        tot = sb + sw
        tot_inv = np.linalg.inv(tot)
        a = np.linalg.inv(tot - sb @ tot_inv @ sb)
        q = tot_inv - a
        p = tot_inv @ sb @ a
        same = np.block([[tot, sb], [sb, tot]])
        _, logdet_same = np.linalg.slogdet(same)
        _, logdet_tot = np.linalg.slogdet(tot)
        return cls(model.mu, 0.5 * (q + q.T), p, -0.5 * logdet_same + logdet_tot)

    def score(self, enroll, test) -> np.ndarray:
        a = np.atleast_2d(enroll) - self.mu
        b = np.atleast_2d(test) - self.mu
        return (
            0.5 * np.einsum("ij,jk,ik->i", a, self.Q, a)
            + 0.5 * np.einsum("ij,jk,ik->i", b, self.Q, b)
            + np.einsum("ij,jk,ik->i", a, self.P, b)
            + self.const
        )


def plda_llr(model: PLDAModel, e, t) -> float:
    """log p(e, t | same speaker) - log p(e) p(t) under the fitted Gaussians."""
    return float(PLDAScorer.from_model(model).score(e, t)[0])


def plda_classify(model: PLDAModel, train_x, train_y, test_x) -> np.ndarray:
    """Score each test vector against each class's averaged enrollment vector.

    Returns ``(n_test, n_classes)`` LLRs; columns follow ``np.unique(train_y)``.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    scorer = PLDAScorer.from_model(model)
    test_x = np.atleast_2d(test_x)
    out = np.empty((len(test_x), len(classes)))
    for j, c in enumerate(classes):
        enroll = train_x[train_y == c].mean(axis=0)
        out[:, j] = scorer.score(np.repeat(enroll[None], len(test_x), axis=0), test_x)
    return out


def length_norm(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


@dataclass
class PLDABackend:
    """Center on the training mean, length-normalize, then score with PLDA."""

    center: np.ndarray
    model: PLDAModel

    @classmethod
    def fit(cls, x, labels, q: int, n_iter: int = 20, init: str = "pca") -> "PLDABackend":
        x = np.asarray(x, dtype=np.float64)
        center = x.mean(axis=0)
        q = min(q, x.shape[1], len(np.unique(labels)) - 1)
        return cls(center, plda_fit(length_norm(x - center), labels, q, n_iter, init))

    def transform(self, x) -> np.ndarray:
        return length_norm(np.atleast_2d(x) - self.center)

    def score(self, enroll, test) -> np.ndarray:
        return PLDAScorer.from_model(self.model).score(self.transform(enroll), self.transform(test))

    def save(self, path) -> None:
        m = self.model
        with open(path, "w") as fh:
            fh.write("plda-backend 1\n")
            _write_blocks(fh, (("center", self.center[None, :]), ("mu", m.mu[None, :]), ("V", m.V), ("Sw", m.Sw)))

    @classmethod
    def load(cls, path) -> "PLDABackend":
        with open(path) as fh:
            if fh.readline().split()[:1] != ["plda-backend"]:
                raise ValueError(f"{path}: not a PLDA backend file")
            b = _read_blocks(fh)
        return cls(b["center"][0], PLDAModel(b["mu"][0], b["V"], b["Sw"]))


# --- multinomial logistic regression -----------------------------------------------


@dataclass
class LogRegModel:
    W: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)
    classes: np.ndarray
    grad_norm: float = 0.0


def _logreg_objective(theta, x, y_onehot, l2):
    n, d = x.shape
    c = y_onehot.shape[1]
    w = theta[: c * d].reshape(c, d)
    b = theta[c * d :]
    z = x @ w.T + b
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -np.sum(y_onehot * logp) / n + 0.5 * l2 * np.sum(w * w)
    g = (np.exp(logp) - y_onehot) / n
    gw = g.T @ x + l2 * w
    gb = g.sum(axis=0)
    return loss, np.concatenate([gw.ravel(), gb])


def logreg_fit(x, labels, l2: float = 1e-2, tol: float = 1e-6, max_iter: int = 5000) -> LogRegModel:
    """L2-regularized multinomial LR; quasi-Newton with line search until ||grad|| < tol."""
    x = np.asarray(x, dtype=np.float64)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("logistic regression needs at least two classes")
    n, d = x.shape
    onehot = np.eye(len(classes))[y]
    theta0 = np.zeros(len(classes) * (d + 1))
    res = optimize.minimize(
        _logreg_objective, theta0, args=(x, onehot, l2), jac=True, method="L-BFGS-B",
        options={"gtol": tol * 0.1, "ftol": 0.0, "maxiter": max_iter, "maxcor": 30},
    )
    theta = res.x
    _, g = _logreg_objective(theta, x, onehot, l2)
    c = len(classes)
    return LogRegModel(theta[: c * d].reshape(c, d), theta[c * d :], classes, float(np.linalg.norm(g)))


def logreg_predict(model: LogRegModel, x) -> np.ndarray:
    z = np.atleast_2d(x) @ model.W.T + model.b
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def logreg_loss(model: LogRegModel, x, labels, l2: float):
    """Objective and gradient at the fitted parameters (for checks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.searchsorted(model.classes, np.asarray(labels))
    onehot = np.eye(len(model.classes))[y]
    theta = np.concatenate([model.W.ravel(), model.b])
    return _logreg_objective(theta, x, onehot, l2)

