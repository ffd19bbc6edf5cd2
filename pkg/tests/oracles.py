"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (python loops,
double precision) so it shares no code with the library under test.
"""

import numpy as np


def finite_difference_grad(f, x, h=1e-2):
    """Central-difference gradient of scalar-valued f at float32 array x.

    f takes an ndarray shaped like x and returns a python float. Step size is
    sized for float32 forward arithmetic.
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def grad_close(analytic, numeric, tol=1e-3):
    """Relative agreement with a unit floor, max over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) <= tol


def kl_categorical(logits_p, logits_q):
    """KL(P || Q) for one categorical pair, double precision."""
    lp = np.asarray(logits_p, dtype=np.float64)
    lq = np.asarray(logits_q, dtype=np.float64)
    lp = lp - np.log(np.sum(np.exp(lp - np.max(lp)))) - np.max(lp)
    lq = lq - np.log(np.sum(np.exp(lq - np.max(lq)))) - np.max(lq)
    p = np.exp(lp)
    return float(np.sum(p * (lp - lq)))


def entropy_categorical(logits):
    l = np.asarray(logits, dtype=np.float64)
    l = l - np.max(l)
    l = l - np.log(np.sum(np.exp(l)))
    p = np.exp(l)
    return float(-np.sum(p * l))


def adam_reference(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Double-precision Adam trajectory; returns param after each step."""
    p = np.asarray(param, dtype=np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p.copy())
    return out


def conv2d_reference(x, k, stride):
    """Valid cross-correlation, python loops, double precision."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, c, h, w = x.shape
    o, c2, kh, kw = k.shape
    assert c == c2
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = x[ni, :, yi * stride:yi * stride + kh,
                              xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * k[oi])
    return out


def discounted_returns_reference(rewards, gamma):
    """Reverse-scan discounted sums, double precision."""
    g = 0.0
    out = []
    for r in reversed(list(rewards)):
        g = float(r) + gamma * g
        out.append(g)
    return np.array(out[::-1], dtype=np.float64)


def gae_reference(rewards, values, gamma, tau):
    """Generalized advantage recurrence with terminal bootstrap 0.

    Double precision regardless of input dtype so the recurrence itself is
    the only thing under test.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    T = len(r)
    adv = np.zeros(T, dtype=np.float64)
    last = 0.0
    for t in reversed(range(T)):
        next_v = v[t + 1] if t + 1 < T else 0.0
        delta = r[t] + gamma * next_v - v[t]
        last = delta + gamma * tau * last
        adv[t] = last
    return adv


def knn_purity_reference(reps, labels, k=5):
    """Brute-force k-NN label purity: per-query python loop, stable ties.

    Euclidean distance in double precision, query excluded, ties broken by
    lower index. Returns mean fraction of the k neighbours sharing the
    query's label.
    """
    reps = np.asarray(reps, dtype=np.float64)
    n = reps.shape[0]
    fracs = []
    for i in range(n):
        d = np.sum((reps - reps[i]) ** 2, axis=1)
        order = sorted(j for j in range(n) if j != i)
        order.sort(key=lambda j: (d[j], j))
        neigh = order[:k]
        fracs.append(sum(1 for j in neigh if labels[j] == labels[i]) / k)
    return float(np.mean(fracs))
