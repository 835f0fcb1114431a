"""Pure numpy versions of the attack hot path.

Semantics match ``_kernels.pyx`` exactly; see :mod:`aptlab.kernels`.
"""

import numpy as np


def image_loss_grad(x, w1, b1, w2, b2, text_features, inv_tau, labels):
    """Per-example cross-entropy of cosine logits and its input gradients.

    Returns ``(loss, grad_x, grad_t)``: ``loss[i]`` is the loss of example i,
    ``grad_x[i]`` is d loss[i] / d x[i] and ``grad_t`` is the gradient of the
    batch-mean loss with respect to the (unnormalized) text features.
    """
    n = x.shape[0]
    h = np.tanh(x @ w1 + b1)
    z = h @ w2 + b2
    zn = np.sqrt(np.einsum("ij,ij->i", z, z))
    zh = z / zn[:, None]
    tn = np.sqrt(np.einsum("ij,ij->i", text_features, text_features))
    th = text_features / tn[:, None]
    logits = (zh @ th.T) * inv_tau
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    se = e.sum(axis=1, keepdims=True)
    p = e / se
    rows = np.arange(n)
    loss = (np.log(se[:, 0]) + mx[:, 0]) - logits[rows, labels]

    ds = p
    ds[rows, labels] -= 1.0
    ds *= inv_tau
    dzh = ds @ th
    dz = (dzh - np.einsum("ij,ij->i", dzh, zh)[:, None] * zh) / zn[:, None]
    da = (dz @ w2.T) * (1.0 - h * h)
    grad_x = da @ w1.T

    dth = (ds.T @ zh) / n
    grad_t = (dth - np.einsum("ij,ij->i", dth, th)[:, None] * th) / tn[:, None]
    return loss, grad_x, grad_t


def pgd_step(x, delta, grad, alpha, eps):
    """One signed step on ``delta`` (in place); returns the clamped image.

    Pixels where ``x + delta`` lies outside [0, 1] get zero gradient, the
    subgradient of the clamp applied before the loss.
    """
    raw = x + delta
    inside = (raw >= 0.0) & (raw <= 1.0)
    step = alpha * np.sign(np.where(inside, grad, 0.0))
    np.clip(delta + step, -eps, eps, out=delta)
    return np.clip(x + delta, 0.0, 1.0)
