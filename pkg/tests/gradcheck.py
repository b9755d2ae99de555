"""Finite-difference gradient checks shared by the unit and acceptance suites."""

import numpy as np
import torch

from ffkit import tensor as T
from ffkit.model import FusionNet, ModelConfig
from ffkit.train import Batch, forward, loss, make_targets

from oracles import central_difference, directional_difference, relative_error
from samples import priors

D = torch.float64


def _rand(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=D) * scale).requires_grad_(True)


def _err(f, inputs) -> float:
    analytic = list(torch.autograd.grad(f(*inputs), inputs))
    return relative_error(analytic, central_difference(f, inputs))


def op_gradient_errors(seed: int) -> dict[str, float]:
    """Worst relative error per differentiable op for one seed of random inputs."""
    g = torch.Generator().manual_seed(seed)
    out = {}
    out["matmul"] = _err(lambda a, b: (T.matmul(a, b) ** 2).sum(), [_rand(g, 3, 4), _rand(g, 4, 2)])
    a, b = _rand(g, 5), _rand(g, 5)
    out["add_mul"] = _err(lambda a, b: (T.mul(a, b) * T.add(a, b)).sum(), [a, b])
    out["scale"] = _err(lambda a: (T.scale(a, 3.0) ** 2).sum(), [_rand(g, 5)])
    # inputs kept off the ReLU kink so the difference quotient is meaningful
    x = (_rand(g, 6).detach().abs() + 0.1) * torch.tensor([1, -1, 1, -1, 1, -1], dtype=D)
    out["relu"] = _err(lambda x: (T.relu(x) ** 2).sum(), [x.requires_grad_(True)])
    out["reduce_max"] = _err(lambda x: (T.reduce_max_over_points(x) ** 2).sum(), [_rand(g, 6, 4)])
    out["softmax"] = _err(lambda x: (T.softmax(x) * torch.arange(5.0, dtype=D)).sum(), [_rand(g, 3, 5)])
    out["log_softmax"] = _err(lambda x: (T.log_softmax(x) * torch.arange(5.0, dtype=D)).sum(), [_rand(g, 3, 5)])
    out["linear"] = _err(lambda x, w, b: (T.linear(x, w, b) ** 2).sum(), [_rand(g, 3, 4), _rand(g, 2, 4), _rand(g, 2)])
    out["layer_norm"] = _err(lambda x, w, b: (T.layer_norm(x, w, b) ** 3).sum(), [_rand(g, 3, 6), _rand(g, 6), _rand(g, 6)])
    out["conv2d"] = _err(
        lambda x, k, b: (T.conv2d(x, k, b, stride=2, pad=1) ** 2).sum(),
        [_rand(g, 2, 5, 5), _rand(g, 3, 2, 3, 3), _rand(g, 3)],
    )
    tgt = torch.tensor([0, 2, 1])
    out["cross_entropy"] = _err(lambda x: T.cross_entropy(x, tgt), [_rand(g, 3, 3)])
    x = _rand(g, 8, scale=2.0).detach()
    x = torch.where((x.abs() - 1).abs() < 1e-3, x + 0.01, x).requires_grad_(True)
    out["smooth_l1"] = _err(lambda x: T.smooth_l1(x).sum(), [x])
    d = 8
    leaves = [_rand(g, 4, d)] + [_rand(g, d, d, scale=0.3) for _ in range(4)] + [_rand(g, d, scale=0.1) for _ in range(4)]

    def attn(x, wq, wk, wv, wo, bq, bk, bv, bo):
        return (T.multihead_self_attention(x, 2, T.AttentionParams(wq, wk, wv, wo, bq, bk, bv, bo)) ** 2).sum()

    out["attention"] = _err(attn, leaves)
    return out


def frozen_loss(model, batch, box_weight=1.0):
    rngs = [np.random.default_rng(i) for i in range(len(batch.points))]
    _, _, cent, sels = forward(model, batch, rngs)

    def f():
        seg, out, c, _ = forward(model, batch, rngs, selections=sels)
        return loss(seg, out, c, batch.targets, box_weight)["total"]

    return f


def full_loss_gradcheck(seed: int, samples, n_dirs: int = 3) -> float:
    model = FusionNet(ModelConfig.tiny(), seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # zero biases behind a dead layer sit exactly on a ReLU kink
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    pick = np.random.default_rng(seed).choice(len(samples), 2, replace=False)
    chosen = [samples[i] for i in pick]
    batch = Batch.from_samples(chosen, model.cfg, [make_targets(s, priors()) for s in chosen])
    f = frozen_loss(model, batch)
    params = list(model.parameters())
    grads = torch.autograd.grad(f(), params)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        numeric = directional_difference(f, params, dirs, eps=1e-7)
        worst = max(worst, relative_error(torch.tensor([analytic], dtype=torch.float64), torch.tensor([numeric], dtype=torch.float64)))
    return worst
