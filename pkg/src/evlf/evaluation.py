"""Downstream checks on a distilled set: MLP classifier accuracy, k-NN coverage, 2-D PCA export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .optim import AdamW
from .params import ParamSet, gaussian, zeros
from .tensor import Tensor


@dataclass
class ClassifierParams(ParamSet):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def num_classes(self) -> int:
        return self.w3.shape[1]


def init_classifier(in_dim: int, num_classes: int, width: int = 128, seed: int = 0) -> ClassifierParams:
    rng = np.random.default_rng([seed, 23])
    return ClassifierParams(
        gaussian(rng, (in_dim, width), np.sqrt(2.0 / in_dim)), zeros(width),
        gaussian(rng, (width, width), np.sqrt(2.0 / width)), zeros(width),
        gaussian(rng, (width, num_classes), np.sqrt(1.0 / width)), zeros(num_classes),
    )


def _features(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(len(images), -1) - 0.5


def logits(params: ClassifierParams, images) -> Tensor:
    x = _features(images)
    h = tn.relu(tn.linear(x, params.w1, params.b1))
    h = tn.relu(tn.linear(h, params.w2, params.b2))
    return tn.linear(h, params.w3, params.b3)


def cross_entropy(z: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(z.shape[-1])[labels]
    return tn.mean(tn.sub(tn.logsumexp(z, axis=-1), tn.sum_(tn.mul(z, onehot), axis=-1)))


def train_classifier(images, labels, num_classes: int, *, epochs: int = 100, lr: float = 1e-3, seed: int = 0,
                     batch: int = 32, width: int = 128,
                     weight_decay: float = 1e-2) -> tuple[ClassifierParams, list[float]]:
    """Fixed-budget minibatch AdamW on softmax cross-entropy; returns params and per-epoch mean loss."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("train_classifier: empty training set")
    params = init_classifier(int(np.prod(images.shape[1:])), num_classes, width, seed)
    opt = AdamW.single(params.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 29])
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            loss = cross_entropy(logits(params, images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(images))
    return params.requires_grad_(False), history


def predict(model, images) -> np.ndarray:
    """Top-1 class; ``model`` is ClassifierParams or a callable returning (n, K) scores. Ties -> lowest index."""
    scores = logits(model, images).data if isinstance(model, ClassifierParams) else np.asarray(model(images))
    return np.argmax(scores, axis=-1)


def evaluate(model, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluate: empty test set")
    return float(np.mean(predict(model, images) == labels))


# -- coverage ---------------------------------------------------------------------------------
@dataclass
class CoverageReport:
    k: int
    radii: np.ndarray
    covered: np.ndarray
    score: float


def _pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((len(a), len(b)))
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def coverage(real, generated, k: int = 20) -> CoverageReport:
    """Fraction of generated points inside the k-th-nearest-real-neighbour ball of some real point."""
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    generated = np.asarray(generated, dtype=np.float64).reshape(len(generated), -1)
    if len(real) <= k:
        raise ValueError(f"coverage needs more than k={k} real points, got {len(real)}")
    rr = _pairwise(real, real)
    np.fill_diagonal(rr, np.inf)
    radii = np.sort(rr, axis=1)[:, k - 1]
    covered = (_pairwise(generated, real) <= radii[None, :]).any(axis=1)
    score = float(covered.mean()) if len(covered) else 0.0
    return CoverageReport(k, radii, covered, score)


# -- 2-D projection ---------------------------------------------------------------------------
@dataclass
class Embedding2D:
    coords: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    degenerate: bool = False


def pca_2d(vectors, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> Embedding2D:
    """Top-2 principal components by power iteration with deflation.

    Iterates on the covariance matrix or, when there are fewer samples than features,
    on the (smaller) Gram matrix; both share the nonzero spectrum.
    """
    x = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    if len(x) < 2:
        raise ValueError("need at least two vectors")
    xc = x - x.mean(axis=0)
    n, dim = xc.shape
    dual = n < dim
    mat = (xc @ xc.T if dual else xc.T @ xc) / (n - 1)
    if np.allclose(mat, 0.0):
        warnings.warn("zero-variance input; 2-D embedding is all zeros", RuntimeWarning)
        return Embedding2D(np.zeros((n, 2)), np.zeros((2, dim)), np.zeros(2), True)
    rng = np.random.default_rng(seed)
    vecs = _top_eigvecs(mat, min(2, len(mat)), rng, tol, max_iter)
    comps = []
    for v in vecs:
        c = xc.T @ v if dual else v
        norm = np.linalg.norm(c)
        comps.append(c / norm if norm > 0 else np.zeros(dim))
    while len(comps) < 2:
        comps.append(np.zeros(dim))
    components = np.stack(comps)
    coords = xc @ components.T
    variances = (coords ** 2).sum(axis=0) / (n - 1)
    return Embedding2D(coords, components, variances)


def _top_eigvecs(mat: np.ndarray, count: int, rng: np.random.Generator, tol: float, max_iter: int) -> list:
    dim = len(mat)
    floor = 1e-13 * max(float(np.abs(mat).max()), 1e-300)
    work = mat.copy()
    found = []

    def orthogonalize(v):
        for u in found:
            v = v - (v @ u) * u
        return v

    for _ in range(count):
        v = orthogonalize(rng.standard_normal(dim))
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = orthogonalize(work @ v)
            norm = np.linalg.norm(w)
            if norm <= floor:
                # remaining spectrum is numerically zero: keep the orthogonal start vector
                break
            w /= norm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        v = orthogonalize(v)
        v /= np.linalg.norm(v)
        found.append(v)
        work = work - float(v @ mat @ v) * np.outer(v, v)
    return found


def export_embeddings_2d(vectors, labels, sources) -> tuple[list[tuple], Embedding2D]:
    """CSV rows (x, y, label, source) of the joint 2-D PCA projection."""
    emb = pca_2d(vectors)
    rows = [(float(x), float(y), int(lab), str(src)) for (x, y), lab, src in zip(emb.coords, labels, sources)]
    return rows, emb
