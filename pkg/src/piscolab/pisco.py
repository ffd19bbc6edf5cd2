"""Policy self-consistency auxiliary objective and image augmentations.

Two augmented views of each state are encoded to z1, z2 and projected to
p1, p2; the loss is the symmetrized dissimilarity mean(0.5 * (D(z1, p2) +
D(z2, p1))). D is either the KL between the policy distributions induced by
the two branches (the z side detached) or the negative cosine between the
embeddings themselves (the SimSiam-style ablation).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import (
    Tensor,
    div,
    kl_from_logits,
    mul,
    sqrt,
    stop_gradient,
    tensor_mean,
    tensor_sum,
)
from .errors import ConfigError

POLICY_KL = "policy_kl"
NEGATIVE_COSINE = "negative_cosine"


@dataclasses.dataclass(frozen=True)
class RandomShift:
    """Edge-replicate pad by `pad` pixels, then crop a random window."""
    pad: int = 4


@dataclasses.dataclass(frozen=True)
class RandomRotation:
    """Rotate about the image center by a uniform angle in (-max_deg, +max_deg)."""
    max_deg: float = 12.0


@dataclasses.dataclass(frozen=True)
class Compose:
    specs: tuple = ()


def rotate_image(img: np.ndarray, deg: float) -> np.ndarray:
    """Rotate an (H, W) image by `deg` degrees, bilinear sampling, zero fill.

    Positive angles turn the content counterclockwise. Zero degrees is an
    exact copy.
    """
    if deg == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(deg)
    cos_a, sin_a = np.cos(rad), np.sin(rad)
    ii, jj = np.mgrid[0:h, 0:w]
    di = ii - cy
    dj = jj - cx
    # inverse map: where each output pixel samples from
    src_i = cos_a * di + sin_a * dj + cy
    src_j = -sin_a * di + cos_a * dj + cx
    i0 = np.floor(src_i).astype(np.int64)
    j0 = np.floor(src_j).astype(np.int64)
    fi = src_i - i0
    fj = src_j - j0
    out = np.zeros((h, w), dtype=np.float64)
    for oi, oj, wgt in ((0, 0, (1 - fi) * (1 - fj)), (0, 1, (1 - fi) * fj),
                        (1, 0, fi * (1 - fj)), (1, 1, fi * fj)):
        si = i0 + oi
        sj = j0 + oj
        ok = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
        out[ok] += wgt[ok] * img[si[ok], sj[ok]]
    return out.astype(img.dtype)


def _shift_batch(obs: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad == 0:
        return obs
    b, c, h, w = obs.shape
    padded = np.pad(obs, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    out = np.empty_like(obs)
    for i in range(b):
        oy, ox = offsets[i]
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return out


def _rotate_batch(obs: np.ndarray, max_deg: float,
                  rng: np.random.Generator) -> np.ndarray:
    if max_deg == 0.0:
        return obs
    b = obs.shape[0]
    angles = rng.uniform(-max_deg, max_deg, size=b)
    out = np.empty_like(obs)
    for i in range(b):
        for ch in range(obs.shape[1]):
            out[i, ch] = rotate_image(obs[i, ch], float(angles[i]))
    return out


def augment(obs: np.ndarray, spec, rng: np.random.Generator) -> np.ndarray:
    """One independent augmentation draw per sample of a (B, C, H, W) batch."""
    if isinstance(spec, RandomShift):
        return _shift_batch(obs, spec.pad, rng)
    if isinstance(spec, RandomRotation):
        return _rotate_batch(obs, spec.max_deg, rng)
    if isinstance(spec, Compose):
        for member in spec.specs:
            obs = augment(obs, member, rng)
        return obs
    raise ConfigError(f"unknown augmentation spec {spec!r}")


def dissimilarity_policy(z: Tensor, p: Tensor, policy) -> Tensor:
    """KL(detached policy(z-branch) || policy(p-branch)), averaged over rows.

    The z branch contributes targets only; gradient flows through the p
    branch, including into the shared policy head parameters.
    """
    target_logits = stop_gradient(policy(z))
    return tensor_mean(kl_from_logits(target_logits, policy(p)))


def _dissimilarity_cosine(z: Tensor, p: Tensor) -> Tensor:
    zd = stop_gradient(z)
    num = tensor_sum(mul(zd, p), -1)
    den = mul(sqrt(tensor_sum(mul(zd, zd), -1)),
              sqrt(tensor_sum(mul(p, p), -1))) + 1e-8
    return tensor_mean(mul(div(num, den), -1.0))


def _pair_term(z: Tensor, p: Tensor, policy, kind: str) -> Tensor:
    if kind == POLICY_KL:
        return dissimilarity_policy(z, p, policy)
    if kind == NEGATIVE_COSINE:
        return _dissimilarity_cosine(z, p)
    raise ConfigError(f"unknown dissimilarity kind {kind!r}")


def pisco_loss_from_views(view1: np.ndarray, view2: np.ndarray, encoder,
                          projector, policy, kind: str,
                          use_projector: bool = True) -> Tensor:
    """Symmetrized dissimilarity of two already-augmented observation batches."""
    if use_projector and projector is None:
        raise ConfigError("projector required but not provided; "
                          "pass use_projector=False to run the ablation")
    z1 = encoder(Tensor(view1))
    z2 = encoder(Tensor(view2))
    p1 = projector(z1) if use_projector else z1
    p2 = projector(z2) if use_projector else z2
    d12 = _pair_term(z1, p2, policy, kind)
    d21 = _pair_term(z2, p1, policy, kind)
    return mul(d12 + d21, 0.5)


def pisco_loss(states: np.ndarray, encoder, projector, policy, spec,
               kind: str, rng: np.random.Generator,
               use_projector: bool = True) -> Tensor:
    """Draw two augmentations of each state and score their consistency."""
    if use_projector and projector is None:
        raise ConfigError("projector required but not provided; "
                          "pass use_projector=False to run the ablation")
    if kind not in (POLICY_KL, NEGATIVE_COSINE):
        raise ConfigError(f"unknown dissimilarity kind {kind!r}")
    view1 = augment(states, spec, rng)
    view2 = augment(states, spec, rng)
    return pisco_loss_from_views(view1, view2, encoder, projector, policy,
                                 kind, use_projector=use_projector)
