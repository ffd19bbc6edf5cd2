"""Adam with bias correction and per-group learning rates."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class _Group:
    __slots__ = ("names", "params", "lr")

    def __init__(self, params, lr):
        self.names = list(params.keys())
        self.params = list(params.values())
        self.lr = float(lr)


class Adam:
    """Bias-corrected Adam.

    Defaults beta1=0.9, beta2=0.999, eps=1e-8. Construct either from a single
    name->Tensor dict plus lr, or from [(params_dict, lr), ...] groups when
    different parts of the model train at different rates. Parameters that are
    frozen (requires_grad False) or that received no gradient are skipped
    entirely: no moment update, no step-count effect on them.
    """

    def __init__(self, params=None, lr=None, groups=None,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if groups is None:
            groups = [(params, lr)]
        self.groups = [_Group(p, l) for p, l in groups]
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [[np.zeros_like(p.data) for p in g.params] for g in self.groups]
        self._v = [[np.zeros_like(p.data) for p in g.params] for g in self.groups]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for gi, group in enumerate(self.groups):
            for pi, p in enumerate(group.params):
                if not p.requires_grad or p.grad is None:
                    continue
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise NumericError(
                        f"non-finite gradient for parameter {group.names[pi]}")
                m = self._m[gi][pi]
                v = self._v[gi][pi]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                p.data -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def scale_lrs(self, factor):
        for group in self.groups:
            group.lr *= factor

    @property
    def lrs(self):
        return [g.lr for g in self.groups]
