"""Composite gradient checks: each returns the worst relative error over ``n`` random cases."""

import numpy as np

from aptlab import kernels
from aptlab.attack import TextGradient
from aptlab.baselines import LinearHead, avp_loss_graph, head_input_grad, head_loss_graph
from aptlab.model import encode_image, encode_text
from aptlab.prompt import init_context
from aptlab.training import TrainConfig, train_one_iteration
from oracles import central_diff, ref_losses, rel_err, small_model, stable_ce


def _batch(rng, model, lo=0.05, hi=0.95):
    b = int(rng.integers(1, 4))
    x = rng.uniform(lo, hi, (b, model.w1.shape[0]))
    return x, rng.integers(0, model.n_classes, b)


def image_grad(n=100, impl=None, seed=0):
    """Per-example dL/dx from the attack kernel vs central differences."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for _ in range(n):
        x, y = _batch(rng, m)
        t = rng.normal(size=(m.n_classes, m.embed_dim))
        _, gx, _ = kernels.image_loss_grad(x, m.w1, m.b1, m.w2, m.b2, t, 1 / m.tau, y, impl=impl)
        num = central_diff(lambda v: float(ref_losses(m, v, y, t).sum()), x)
        worst = max(worst, rel_err(gx, num))
    return worst


def text_feature_grad(n=100, impl=None, seed=1):
    """dL/d(text features) of the batch-mean loss from the kernel."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for _ in range(n):
        x, y = _batch(rng, m)
        t = rng.normal(size=(m.n_classes, m.embed_dim))
        _, _, gt = kernels.image_loss_grad(x, m.w1, m.b1, m.w2, m.b2, t, 1 / m.tau, y, impl=impl)
        num = central_diff(lambda v: float(ref_losses(m, x, y, v).mean()), t)
        worst = max(worst, rel_err(gt, num))
    return worst


def token_grad(n=100, seed=2):
    """dL/d(prompt token vectors), the joint text perturbation direction."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for _ in range(n):
        x, y = _batch(rng, m)
        tokens = rng.normal(size=(m.n_classes, int(rng.integers(1, 4)), m.embed_dim))
        tg = TextGradient(m, tokens)
        t = tg.features(tokens)
        _, _, gt = kernels.image_loss_grad(x, m.w1, m.b1, m.w2, m.b2, t, 1 / m.tau, y)
        got = tg.token_grad(gt)
        num = central_diff(lambda v: float(ref_losses(m, x, y, encode_text(m, v)).mean()), tokens)
        worst = max(worst, rel_err(got, num))
    return worst


def context_grad(n=100, seed=3):
    """dL/dv as applied by one APT update, on a 2-vector context."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for i in range(n):
        x, y = _batch(rng, m)
        mode = ("uc", "csc")[i % 2]
        position = ("front", "middle", "end")[i % 3]
        ctx = init_context(mode, 2, m.n_classes, m.embed_dim, i, m.class_embeddings, position)
        ctx.vectors = rng.normal(size=ctx.vectors.shape)
        v0 = ctx.vectors.copy()
        cfg = TrainConfig.build("on-the-fly", eps=0.05, vocab_size=10, n_classes=3, m=2,
                                mode=mode, position=position)
        out = train_one_iteration(ctx, m, x, y, np.arange(len(y)), cfg, lr=1.0)
        got = v0 - ctx.vectors
        imgs = out["images"]

        def loss(v):
            c = ctx.copy()
            c.vectors = v
            return float(ref_losses(m, imgs, y, encode_text(m, c.tokens())).mean())

        worst = max(worst, rel_err(got, central_diff(loss, v0)))
    return worst


def visual_prompt_grad(n=100, seed=4):
    """d/dphi of L(x + phi) + L(x + delta + phi)."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for _ in range(n):
        x, y = _batch(rng, m, 0.2, 0.8)
        x_adv = x + rng.uniform(-0.05, 0.05, x.shape)
        t = rng.normal(size=(m.n_classes, m.embed_dim))
        phi = rng.uniform(-0.05, 0.05, x.shape[1])
        g, p, loss = avp_loss_graph(m, x, x_adv, phi, t, y)
        g.forward()
        got = g.backward(loss)[p]

        def f(v):
            return float(ref_losses(m, np.clip(x + v, 0, 1), y, t).mean()
                         + ref_losses(m, np.clip(x_adv + v, 0, 1), y, t).mean())

        worst = max(worst, rel_err(got, central_diff(f, phi)))
    return worst


def head_grad(n=100, seed=5):
    """d/d(W, b) of the linear-head loss, and the head's input gradient."""
    rng = np.random.default_rng(seed)
    m = small_model()
    worst = 0.0
    for _ in range(n):
        x, y = _batch(rng, m)
        head = LinearHead(rng.normal(size=(m.n_classes, m.embed_dim)), rng.normal(size=m.n_classes))
        z = encode_image(m, x)
        g, wt, b, loss = head_loss_graph(z, head, y)
        g.forward()
        grads = g.backward(loss)

        def ce(w, bias, feats):
            return float(stable_ce(feats @ w.T + bias, y).mean())

        nw = central_diff(lambda w: ce(w, head.bias, z), head.weight)
        nb = central_diff(lambda bb: ce(head.weight, bb, z), head.bias)
        nx = central_diff(lambda v: ce(head.weight, head.bias, encode_image(m, v)) * len(y), x)
        worst = max(worst, rel_err(grads[wt].T, nw), rel_err(grads[b], nb),
                    rel_err(head_input_grad(m, head, x, y), nx))
    return worst


COMPOSITES = {
    "grad_x": image_grad,
    "grad_text_features": text_feature_grad,
    "grad_t": token_grad,
    "grad_v": context_grad,
    "grad_phi": visual_prompt_grad,
    "grad_theta_l": head_grad,
}
