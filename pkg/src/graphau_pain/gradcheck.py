"""Central finite-difference gradient checks for each differentiable stage.

Every stage is evaluated in float64 on down-scaled dimensions.  The scalar
objective is ``sum(R * stage_output)`` for a fixed random ``R``, and each
parameter and input entry is perturbed by ``+-h``.  Points where any ReLU
input lies within ``margin`` of zero are resampled.  The KNN graph is held
constant (built once at the base point).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import model as M
from .training import au_bce_loss, one_hot, weighted_ce_loss

STAGES = ("backbone", "au_heads", "gnn", "gnn_eval", "occurrence", "fusion", "classifier",
          "loss", "au_bce")


@dataclass
class Dims:
    n_au: int = 4
    d_au: int = 8
    positions: int = 4
    channels: int = 6
    proj_dim: int = 4
    k: int = 2
    d_pain: int = 3
    batch: int = 2

    def model_config(self) -> M.ModelConfig:
        side = 16 * int(round(self.positions ** 0.5))
        return M.ModelConfig(n_au=self.n_au, d_au=self.d_au, positions=self.positions,
                             channels=self.channels, proj_dim=self.proj_dim, k=self.k,
                             d_pain=self.d_pain, backbone="desk", image_side=side,
                             desk_widths=(2, 3, 3))


def _stage_closure(stage: str, net: M.GraphAUPain, dims: Dims, gen: torch.Generator):
    """Returns ``(inputs, params, fn)``; ``fn()`` gives ``(output, relu_inputs)``."""
    B, n, d, P, D = dims.batch, dims.n_au, dims.d_au, dims.positions, dims.channels
    dt = torch.float64

    def rand(*shape, low=-1.0, high=1.0):
        return (torch.rand(*shape, generator=gen, dtype=dt) * (high - low) + low).requires_grad_(True)

    named = dict(net.named_parameters())

    def params(*prefixes):
        return {k: v for k, v in named.items() if k.startswith(prefixes)}

    if stage == "backbone":
        x = rand(1, 3, net.config.image_side, net.config.image_side, low=0.0, high=1.0)
        inputs, ps = {"image": x}, params("backbone.")

        def fn():
            pre = []
            out = M.backbone_forward(net.backbone, x, net.config.image_side, pre)
            return out, pre

    elif stage == "au_heads":
        fmap = rand(B, P, D, low=0.0, high=1.0)
        inputs, ps = {"fmap": fmap}, params("au.heads.")
        w, b = named["au.heads.weight"], named["au.heads.bias"]

        def fn():
            pre = torch.einsum("bd,nkd->bnk", fmap.mean(1), w) + b
            return M.au_node_features(fmap, w, b), [pre]

    elif stage in ("gnn", "gnn_eval"):
        H = rand(B, n, d)
        A = M.build_knn_graph(H.detach(), dims.k)
        inputs, ps = {"H_a": H}, params("gnn.")
        net.gnn.train(stage == "gnn")
        if stage == "gnn_eval":
            with torch.no_grad():
                net.gnn.bn.running_mean.uniform_(-0.5, 0.5, generator=gen)
                net.gnn.bn.running_var.uniform_(0.5, 2.0, generator=gen)
        momentum = net.gnn.bn.momentum
        net.gnn.bn.momentum = 0.0  # keep running stats fixed across evaluations

        def fn():
            msg = A.transpose(-1, -2) @ net.gnn.fc1(H) + net.gnn.fc2(H)
            pre = H + net.gnn.bn(msg.reshape(-1, d)).reshape(B, n, d)
            return M.gnn_forward(H, A, net.gnn), [pre]

        fn.restore = lambda: setattr(net.gnn.bn, "momentum", momentum)

    elif stage == "occurrence":
        H = rand(B, n, d, low=-0.5, high=1.0)
        inputs, ps = {"H_a2": H}, params("au.anchors.")
        with torch.no_grad():
            named["au.anchors.weight"].uniform_(-0.5, 1.0, generator=gen)

        def fn():
            p, _, _ = M.au_occurrence_probs(H, named["au.anchors.weight"])
            return p, [H, named["au.anchors.weight"]]

    elif stage == "fusion":
        h_b = rand(B, P, D, low=0.0, high=1.0)
        H = rand(B, n, d, low=0.0, high=1.0)
        h_g = rand(B, d, low=0.0, high=2.0)
        inputs, ps = {"h_b": h_b, "H_a2": H, "h_g": h_g}, params("proj.")

        def fn():
            h_ab, hg, ha, hb = M.project_and_fuse(h_b, H, h_g, net.proj)
            pre = [net.proj.a(H.mean(1)), net.proj.b(h_b), net.proj.g(h_g),
                   torch.einsum("bp,bpk->bk", ha, hb)]
            return torch.cat([h_ab, hg], dim=-1), pre

    elif stage == "classifier":
        h_ab = rand(B, dims.proj_dim, low=0.0, high=1.0)
        hg = rand(B, dims.proj_dim, low=0.0, high=1.0)
        inputs, ps = {"h_ab": h_ab, "h_g2": hg}, params("classifier.")

        def fn():
            return M.classify(h_ab, hg, net.classifier), []

    elif stage == "loss":
        logits = rand(B + 2, dims.d_pain, low=-2.0, high=2.0)
        labels = torch.randint(0, dims.d_pain, (B + 2,), generator=gen)
        weights = torch.rand(dims.d_pain, generator=gen, dtype=dt) + 0.1
        y = one_hot(labels, dims.d_pain, dt)
        inputs, ps = {"logits": logits}, {}

        def fn():
            return weighted_ce_loss(logits, y, weights).reshape(1), []

    elif stage == "au_bce":
        p = rand(B, n, low=0.05, high=0.95)
        bits = (torch.rand(B, n, generator=gen) < 0.5).to(dt)
        pw = torch.rand(n, generator=gen, dtype=dt) + 0.5
        inputs, ps = {"p": p}, {}

        def fn():
            return au_bce_loss(p, bits, pw).reshape(1), []

    else:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    return inputs, ps, fn


def _rel_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """``||a-b|| / max(||a||, ||b||, floor)``."""
    scale = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / scale


class _KinkCrossed(Exception):
    pass


def _check_once(stage, dims, gen, h, margin):
    net = M.GraphAUPain(dims.model_config(), seed=int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    net.double()
    inputs, ps, fn = _stage_closure(stage, net, dims, gen)
    try:
        out, pre = fn()
        if any(float(t.detach().abs().min()) <= margin for t in pre):
            raise _KinkCrossed
        signs = [t.detach() > 0 for t in pre]
        R = torch.randn(out.shape, generator=gen, dtype=torch.float64)
        leaves = dict(inputs)
        leaves.update(ps)

        def objective():
            o, pr = fn()
            if any(not torch.equal(p.detach() > 0, s) for p, s in zip(pr, signs)):
                raise _KinkCrossed
            return float((o * R).sum())

        (out * R).sum().backward()
        pairs = []
        with torch.no_grad():
            for name, t in leaves.items():
                analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                numeric = torch.zeros_like(t)
                flat, nflat = t.view(-1), numeric.view(-1)
                for i in range(flat.numel()):
                    orig = float(flat[i])
                    flat[i] = orig + h
                    fp = objective()
                    flat[i] = orig - h
                    fm = objective()
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2 * h)
                pairs.append((analytic, numeric))
        # A tensor whose true gradient is identically zero (a bias feeding batch
        # norm) only sees finite-difference roundoff, so the denominator floor
        # scales with the whole stage's gradient.
        stage_norm = float(torch.cat([a.reshape(-1) for a, _ in pairs]).norm()) if pairs else 0.0
        floor = max(1e-6, 1e-6 * stage_norm)
        return max((_rel_error(a, n, floor) for a, n in pairs), default=0.0)
    finally:
        if hasattr(fn, "restore"):
            fn.restore()


def grad_check(stage: str, dims: Dims = None, seed: int = 0, h: float = 1e-5,
               margin: float = 1e-3, max_tries: int = 200) -> float:
    """Max relative error (over every parameter and input tensor) between autograd
    gradients and central differences for one stage.

    A draw is rejected if a ReLU input is within ``margin`` of zero or if any
    finite-difference evaluation flips a ReLU sign.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    dims = dims or Dims()
    gen = torch.Generator().manual_seed(int(seed))
    for _ in range(max_tries):
        try:
            return _check_once(stage, dims, gen, h, margin)
        except _KinkCrossed:
            continue
    raise RuntimeError(f"{stage}: no kink-free point found in {max_tries} draws")
