"""Representation diagnostics for trained encoders.

Everything here is offline: probe a layer's features against fitted action
values, score nearest-neighbour label purity, trace how a linear action
classifier degrades under input rotation, regress the agent-obstacle gap,
summarize a training log as normalized area under the return curve, and turn
two probe sweeps into a freeze-depth recommendation.

All functions are deterministic given their inputs and seeds; reports are
meant to be byte-stable across reruns.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from .autodiff import Tensor, gelu, matmul, tape, tensor_mean
from .errors import ConfigError
from .nets import LAYER_NAMES, _check_layer
from .optim import Adam
from .pisco import rotate_image

# covariance matrices up to this many dims are eigendecomposed densely;
# larger representations go through the matrix-free path
_DENSE_MAX_DIM = 1024

_CHUNK_ROWS = 512


@dataclasses.dataclass(frozen=True)
class ProbeDataset:
    """State-action pairs with two value columns: raw discounted returns and
    the smoothed targets predicted by the fitted value model."""
    observations: np.ndarray  # (n, 1, H, W) float32
    actions: np.ndarray       # (n,) int64
    returns: np.ndarray       # (n,) float32
    values: np.ndarray        # (n,) float32, value-model predictions
    mlp_mse: float


@dataclasses.dataclass(frozen=True)
class PCA:
    mean: np.ndarray         # (d,) float64
    components: np.ndarray   # (k, d) float64, rows sorted by eigenvalue
    eigenvalues: np.ndarray  # (k,) float64, descending


@dataclasses.dataclass(frozen=True)
class RobustnessReport:
    degrees: tuple
    errors: tuple


def layer_features(encoder, observations, layer: str = "Linear",
                   batch_size: int = 256) -> np.ndarray:
    """Flattened post-activation features of one encoder layer, (n, d) float32."""
    _check_layer(layer)
    obs = np.asarray(observations, dtype=np.float32)
    parts = []
    for start in range(0, obs.shape[0], batch_size):
        chunk = obs[start:start + batch_size]
        out = encoder.forward_upto(Tensor(chunk), layer)
        parts.append(out.data.reshape(chunk.shape[0], -1))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# action-value dataset


def _discounted(rewards, gamma: float) -> np.ndarray:
    g = 0.0
    out = np.empty(len(rewards), dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        g = float(rewards[t]) + gamma * g
        out[t] = g
    return out


def fit_action_values(episodes, gamma: float, size: int = 10000, seed: int = 0,
                      epochs: int = 30, batch_size: int = 256, lr: float = 1e-3,
                      n_actions: int = 2) -> ProbeDataset:
    """Two-stage value fit over rollout transitions.

    Stage one computes discounted returns per episode by reverse scan. Stage
    two trains a small two-hidden-layer network (64 units each, GELU) on
    flattened observations concatenated with one-hot actions, and the
    network's predictions become the dataset's value column: regression
    targets smoothed by the model rather than raw Monte Carlo returns.
    Episodes are consumed in order and the dataset is cut to exactly `size`
    transitions; returns are always computed on whole episodes first, so the
    cut never corrupts the kept suffix sums.
    """
    obs_parts, act_parts, ret_parts = [], [], []
    total = 0
    for ep in episodes:
        obs_parts.append(ep.observations)
        act_parts.append(ep.actions)
        ret_parts.append(_discounted(ep.rewards, gamma))
        total += len(ep.actions)
        if total >= size:
            break
    if total < size:
        raise ConfigError(f"need {size} transitions but rollouts only "
                          f"provide {total}")
    obs = np.concatenate(obs_parts, axis=0)[:size].astype(np.float32)
    actions = np.concatenate(act_parts)[:size].astype(np.int64)
    returns = np.concatenate(ret_parts)[:size].astype(np.float32)

    flat = obs.reshape(size, -1)
    onehot = np.eye(n_actions, dtype=np.float32)[actions]
    inputs = np.concatenate([flat, onehot], axis=1)
    targets = returns

    rng = np.random.default_rng(seed)
    d_in = inputs.shape[1]
    params: dict[str, Tensor] = {}

    def draw(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)

    draw("l1.weight", (d_in, 64), d_in)
    draw("l1.bias", (64,), d_in)
    draw("l2.weight", (64, 64), 64)
    draw("l2.bias", (64,), 64)
    draw("out.weight", (64, 1), 64)
    draw("out.bias", (1,), 64)

    def forward(x: Tensor) -> Tensor:
        h = gelu(matmul(x, params["l1.weight"]) + params["l1.bias"])
        h = gelu(matmul(h, params["l2.weight"]) + params["l2.bias"])
        return matmul(h, params["out.weight"]) + params["out.bias"]

    opt = Adam(params, lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(size)
        for start in range(0, size, batch_size):
            idx = perm[start:start + batch_size]
            xb = Tensor(inputs[idx])
            yb = Tensor(targets[idx].reshape(-1, 1))
            with tape() as tp:
                diff = forward(xb) - yb
                loss = tensor_mean(diff * diff)
            tp.backward(loss)
            opt.step()
            opt.zero_grad()

    preds = np.empty(size, dtype=np.float32)
    for start in range(0, size, 1024):
        xb = Tensor(inputs[start:start + 1024])
        preds[start:start + 1024] = forward(xb).data[:, 0]
    mse = float(np.mean((preds.astype(np.float64) - targets.astype(np.float64)) ** 2))
    return ProbeDataset(observations=obs, actions=actions, returns=returns,
                        values=preds, mlp_mse=mse)


# ---------------------------------------------------------------------------
# PCA


def _chunked_mean(x) -> np.ndarray:
    acc = np.zeros(x.shape[1], dtype=np.float64)
    for start in range(0, x.shape[0], _CHUNK_ROWS):
        acc += x[start:start + _CHUNK_ROWS].astype(np.float64).sum(axis=0)
    return acc / x.shape[0]


def pca_fit(x, k: int) -> PCA:
    """Principal components of the centered data, double precision.

    Small representations use a dense eigendecomposition of the covariance
    (1/n convention). Anything wider than _DENSE_MAX_DIM goes through an
    iterative eigensolver on a matrix-free covariance operator with a fixed
    start vector, chunking rows so the float64 copy never materializes.
    Components are sign-fixed (largest-magnitude coordinate positive) and
    sorted by descending eigenvalue. `k` is clamped, with a warning, when it
    exceeds what the data can support.
    """
    x = np.asarray(x)
    n, d = x.shape
    limit = min(d, n)
    if k > limit:
        warnings.warn(f"pca dim {k} exceeds representation rank bound {limit}; "
                      f"clamping", stacklevel=2)
        k = limit
    if d <= _DENSE_MAX_DIM or k >= d - 1:
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=0)
        xc = x64 - mean
        cov = (xc.T @ xc) / n
        w, v = np.linalg.eigh(cov)
        order = np.argsort(w)[::-1][:k]
        eigvals = w[order]
        comps = v[:, order].T.copy()
    else:
        mean = _chunked_mean(x)

        def matvec(vec):
            vec = vec.reshape(-1)
            acc = np.zeros(d, dtype=np.float64)
            for start in range(0, n, _CHUNK_ROWS):
                xc = x[start:start + _CHUNK_ROWS].astype(np.float64) - mean
                acc += xc.T @ (xc @ vec)
            return acc / n

        op = LinearOperator((d, d), matvec=matvec, dtype=np.float64)
        v0 = np.full(d, 1.0 / np.sqrt(d))
        w, v = eigsh(op, k=k, which="LA", v0=v0)
        order = np.argsort(w)[::-1]
        eigvals = w[order]
        comps = v[:, order].T.copy()
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PCA(mean=mean, components=comps, eigenvalues=eigvals)


def pca_transform(pca: PCA, x) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty((x.shape[0], pca.components.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], _CHUNK_ROWS):
        xc = x[start:start + _CHUNK_ROWS].astype(np.float64) - pca.mean
        out[start:start + _CHUNK_ROWS] = xc @ pca.components.T
    return out


# ---------------------------------------------------------------------------
# linear probing


def ridge_mse(features, targets, ridge: float = 1e-8) -> float:
    """In-sample MSE of a ridge regression with intercept, normal equations."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    design = np.concatenate([f, np.ones((f.shape[0], 1))], axis=1)
    a = design.T @ design + ridge * np.eye(design.shape[1])
    wvec = np.linalg.solve(a, design.T @ y)
    resid = design @ wvec - y
    return float(np.mean(resid ** 2))


def probe_from_features(features, actions, values, pca_dim: int = 50,
                        n_actions: int = 2) -> float:
    """PCA-reduce features, append one-hot actions, ridge-regress values."""
    pca = pca_fit(np.asarray(features), pca_dim)
    proj = pca_transform(pca, features)
    onehot = np.eye(n_actions, dtype=np.float64)[np.asarray(actions)]
    return ridge_mse(np.concatenate([proj, onehot], axis=1), values)


def probe_layer(encoder, layer: str, dataset: ProbeDataset,
                pca_dim: int = 50, batch_size: int = 256) -> float:
    feats = layer_features(encoder, dataset.observations, layer, batch_size)
    return probe_from_features(feats, dataset.actions, dataset.values, pca_dim)


# ---------------------------------------------------------------------------
# nearest-neighbour purity


def knn_purity(reps, labels, k: int = 5) -> float:
    """Mean fraction of each point's k nearest neighbours sharing its label.

    Euclidean distance in double precision, query excluded, ties broken by
    lower index. Matches the brute-force formulation exactly; keep the
    per-query distance expression as is, the stable argsort depends on it.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    n = reps.shape[0]
    if n < k + 1:
        raise ConfigError(f"purity with k={k} needs at least {k + 1} states, "
                          f"got {n}")
    fracs = []
    for i in range(n):
        d = np.sum((reps - reps[i]) ** 2, axis=1)
        d[i] = np.inf
        neigh = np.argsort(d, kind="stable")[:k]
        fracs.append(float(np.sum(labels[neigh] == labels[i])) / k)
    return float(np.mean(fracs))


def cluster_purity(encoder, observations, labels, k: int = 5,
                   layer: str = "Linear", batch_size: int = 256) -> float:
    return knn_purity(layer_features(encoder, observations, layer, batch_size),
                      labels, k)


# ---------------------------------------------------------------------------
# rotation robustness


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logistic_loss(w, b, x, y, l2):
    z = x @ w + b
    # log(1+exp(-|z|)) form is overflow-safe for both label signs
    margins = np.where(y > 0.5, z, -z)
    nll = np.mean(np.log1p(np.exp(-np.abs(margins))) + np.maximum(-margins, 0.0))
    return nll + 0.5 * l2 * float(w @ w)


def fit_linear_classifier(features, labels, l2: float = 1e-4,
                          max_iter: int = 100, tol: float = 1e-9):
    """Binary logistic regression by damped Newton steps.

    The intercept is unpenalized. Returns (weights, bias) in float64.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n, d = x.shape
    xa = np.concatenate([x, np.ones((n, 1))], axis=1)
    wa = np.zeros(d + 1)
    reg = l2 * np.eye(d + 1)
    reg[d, d] = 0.0
    loss = _logistic_loss(wa[:d], wa[d], x, y, l2)
    for _ in range(max_iter):
        p = _sigmoid(xa @ wa)
        grad = xa.T @ (p - y) / n + reg @ wa
        if np.max(np.abs(grad)) < tol:
            break
        weights = np.maximum(p * (1.0 - p), 1e-12)
        hess = (xa * weights[:, None]).T @ xa / n + reg
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(40):
            cand = wa - scale * step
            cand_loss = _logistic_loss(cand[:d], cand[d], x, y, l2)
            if cand_loss <= loss:
                break
            scale *= 0.5
        wa = wa - scale * step
        loss = _logistic_loss(wa[:d], wa[d], x, y, l2)
    return wa[:d], float(wa[d])


def classifier_error(w, b, features, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    preds = (x @ np.asarray(w, dtype=np.float64) + b > 0).astype(int)
    return float(np.mean(preds != np.asarray(labels)))


def robustness_curve(encoder, observations, labels, degrees=tuple(range(13)),
                     seed: int = 0, layer: str = "Linear",
                     batch_size: int = 256) -> RobustnessReport:
    """Error of a fixed linear action classifier under input rotation.

    The classifier is trained once on unperturbed features. For each entry x
    of `degrees`, every observation is rotated by its own angle drawn
    uniformly from (-x, x) and re-encoded; the report records the classifier
    error at each x, exactly as measured (no monotonicity is assumed).
    """
    obs = np.asarray(observations, dtype=np.float32)
    labels = np.asarray(labels)
    feats0 = layer_features(encoder, obs, layer, batch_size).astype(np.float64)
    w, b = fit_linear_classifier(feats0, labels)
    rng = np.random.default_rng(seed)
    errors = []
    for deg in degrees:
        angles = rng.uniform(-float(deg), float(deg), size=obs.shape[0])
        rotated = np.stack([rotate_image(obs[i, 0], angles[i])
                            for i in range(obs.shape[0])])[:, None]
        feats = layer_features(encoder, rotated, layer, batch_size).astype(np.float64)
        errors.append(classifier_error(w, b, feats, labels))
    return RobustnessReport(degrees=tuple(degrees), errors=tuple(errors))


# ---------------------------------------------------------------------------
# distance regression, AURC, freeze recommendation


def regress_distance(encoder, observations, distances,
                     layer: str = "Linear", batch_size: int = 256) -> float:
    """MSE (pixels squared) of a ridge regression from encoder features to
    the signed horizontal agent-obstacle gap."""
    feats = layer_features(encoder, observations, layer, batch_size)
    return ridge_mse(feats.astype(np.float64), distances)


def aurc(mean_returns, max_return: float = 81.0) -> float:
    """Normalized area under the return curve: mean per-iteration return
    divided by the optimum. Invariant to uniform time rescaling."""
    vals = [float(r) for r in mean_returns]
    if not vals:
        raise ConfigError("aurc needs a non-empty return log")
    if max_return <= 0:
        raise ConfigError("max_return must be positive")
    return float(np.mean(vals)) / max_return


def recommend_freeze_depth(mse_frozen: dict, mse_finetuned: dict,
                           tol: float = 0.15):
    """Deepest layer whose whole prefix keeps frozen-probe MSE within a
    relative band of the finetuned probe. None when even Conv1 is out."""
    rec = None
    for layer in LAYER_NAMES:
        if layer not in mse_frozen or layer not in mse_finetuned:
            raise ConfigError(f"probe reports are missing layer {layer}")
        ft = float(mse_finetuned[layer])
        if abs(float(mse_frozen[layer]) - ft) <= tol * ft:
            rec = layer
        else:
            break
    return rec
