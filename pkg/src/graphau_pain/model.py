"""GraphAU-Pain network.

Backbone feature map -> per-AU node features -> dynamic KNN graph -> one
residual graph-convolution layer -> (AU occurrence head, graph pooling,
projection + feature fusion) -> linear pain classifier.

The stage functions below operate on batched tensors (leading batch axis) and
take their parameters explicitly, so they can be checked in isolation;
:class:`GraphAUPain` owns the parameters and wires the stages together.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, KTooLarge, ShapeMismatch

ABLATIONS = ("full", "no_graph_rep", "no_gnn", "backbone_only")
BACKBONES = ("paper", "desk")
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch


@dataclass
class ModelConfig:
    n_au: int = 8
    d_au: int = 512
    positions: int = 36
    channels: int = 2048
    proj_dim: int = 36
    k: int = 3
    d_pain: int = 3
    backbone: str = "paper"
    image_side: int = 172
    desk_widths: tuple = (16, 32, 64)
    ablation: str = "full"

    def __post_init__(self):
        self.desk_widths = tuple(int(w) for w in self.desk_widths)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        kw = dict(d_au=64, channels=64, backbone="desk", image_side=96, positions=36)
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> "ModelConfig":
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.d_pain not in (3, 4):
            raise ConfigError(f"d_pain must be 3 or 4, got {self.d_pain}")
        if self.n_au < 2:
            raise ConfigError("need at least 2 AU nodes")
        if not 1 <= self.k <= self.n_au - 1:
            raise KTooLarge(f"K={self.k} must lie in [1, n_au - 1 = {self.n_au - 1}]")
        if self.backbone == "paper":
            if (self.image_side, self.positions, self.channels) != (172, 36, 2048):
                raise ConfigError("paper backbone is fixed at 172px input, 36 x 2048 output")
        else:
            if len(self.desk_widths) != 3:
                raise ConfigError("desk backbone needs 3 intermediate widths")
            if self.image_side % 16:
                raise ConfigError("desk image side must be divisible by 16")
            if (self.image_side // 16) ** 2 != self.positions:
                raise ConfigError(
                    f"desk backbone on {self.image_side}px yields {(self.image_side // 16) ** 2} "
                    f"positions, config says {self.positions}"
                )
        if self.ablation != "backbone_only" and self.proj_dim != self.positions:
            raise ConfigError("feature fusion needs proj_dim == positions")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["desk_widths"] = list(self.desk_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _init_affine(weight: torch.Tensor, bias: Optional[torch.Tensor], fan_in: int, gen) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        if bias is not None:
            b = 1.0 / math.sqrt(fan_in)
            bias.uniform_(-b, b, generator=gen)


class DeskBackbone(nn.Module):
    """Four stride-2 3x3 convolutions with ReLU; side/16 x side/16 positions."""

    def __init__(self, widths, channels):
        super().__init__()
        chans = (3,) + tuple(widths) + (channels,)
        for i in range(4):
            self.add_module(f"conv{i + 1}", nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))

    def convs(self):
        return [getattr(self, f"conv{i + 1}") for i in range(4)]

    def forward(self, x, preacts: Optional[list] = None):
        for conv in self.convs():
            x = conv(x)
            if preacts is not None:
                preacts.append(x)
            x = F.relu(x)
        return x


class PaperBackbone(nn.Module):
    """ResNet-50 trunk (no pooling/fc): 172x172 input -> 6x6x2048."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.net = nn.Sequential(*(list(net.children())[:-2]))

    def forward(self, x, preacts=None):
        return self.net(x)


class AUHeads(nn.Module):
    def __init__(self, n_au, d_au, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_au, d_au, channels))
        self.bias = nn.Parameter(torch.empty(n_au, d_au))


class Anchors(nn.Module):
    def __init__(self, n_au, d_au):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_au, d_au))


class AUBranch(nn.Module):
    def __init__(self, n_au, d_au, channels):
        super().__init__()
        self.heads = AUHeads(n_au, d_au, channels)
        self.anchors = Anchors(n_au, d_au)


class GraphConv(nn.Module):
    def __init__(self, d_au):
        super().__init__()
        self.fc1 = nn.Linear(d_au, d_au)
        self.fc2 = nn.Linear(d_au, d_au)
        self.bn = nn.BatchNorm1d(d_au, momentum=BN_MOMENTUM)


class Projections(nn.Module):
    def __init__(self, channels, d_au, proj_dim):
        super().__init__()
        self.b = nn.Linear(channels, proj_dim)
        self.a = nn.Linear(d_au, proj_dim)
        self.g = nn.Linear(d_au, proj_dim)


class Classifier(nn.Module):
    def __init__(self, in_dim, d_pain):
        super().__init__()
        self.fc = nn.Linear(in_dim, d_pain)


# ---------------------------------------------------------------- stages

def backbone_forward(backbone: nn.Module, images: torch.Tensor, image_side: int,
                     preacts: Optional[list] = None) -> torch.Tensor:
    """``B x 3 x S x S`` images -> ``B x P x D`` feature map (row-major positions)."""
    if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (image_side, image_side):
        raise ShapeMismatch(
            f"expected images of shape (B, 3, {image_side}, {image_side}), got {tuple(images.shape)}"
        )
    fmap = backbone(images, preacts)
    return fmap.flatten(2).transpose(1, 2)


def au_node_features(fmap: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row i = ReLU(head_i(mean over positions of fmap))."""
    if fmap.shape[-1] != weight.shape[-1]:
        raise ShapeMismatch(f"feature width {fmap.shape[-1]} != head input {weight.shape[-1]}")
    pooled = fmap.mean(dim=-2)
    return F.relu(torch.einsum("bd,nkd->bnk", pooled, weight) + bias)


def knn_indices(H: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` most similar other nodes by dot product, ties to the
    smaller index.  ``H`` is ``(..., n, d)``; result ``(..., n, k)``."""
    n = H.shape[-2]
    if not 1 <= k <= n - 1:
        raise KTooLarge(f"K={k} needs 1 <= K <= n_au - 1 = {n - 1}")
    with torch.no_grad():
        sim = H @ H.transpose(-1, -2)
        eye = torch.eye(n, dtype=torch.bool, device=H.device)
        sim = sim.masked_fill(eye, float("-inf"))
        # stable ascending sort of -sim keeps equal keys in index order
        order = torch.sort(-sim, dim=-1, stable=True).indices
    return order[..., :k]


def build_knn_graph(H: torch.Tensor, k: int) -> torch.Tensor:
    """Row-normalised KNN adjacency: ``A[i, j] = 1/k`` if j is among i's neighbours."""
    idx = knn_indices(H, k)
    A = torch.zeros(H.shape[:-1] + (H.shape[-2],), dtype=H.dtype, device=H.device)
    A.scatter_(-1, idx, 1.0 / k)
    return A


def gnn_forward(H: torch.Tensor, A: torch.Tensor, gnn: GraphConv) -> torch.Tensor:
    """H' = ReLU(H + BN(A^T FC1(H) + FC2(H)))."""
    if A.shape[-1] != H.shape[-2] or A.shape[-2] != H.shape[-2]:
        raise ShapeMismatch(f"adjacency {tuple(A.shape)} does not match {H.shape[-2]} nodes")
    b, n, d = H.shape
    msg = A.transpose(-1, -2) @ gnn.fc1(H) + gnn.fc2(H)
    z = gnn.bn(msg.reshape(b * n, d)).reshape(b, n, d)
    return F.relu(H + z)


def au_occurrence_probs(H: torch.Tensor, anchors: torch.Tensor, threshold: float = 0.5):
    """Cosine similarity of ReLU(h_i) and ReLU(s_i).

    Returns ``(p, bits, degenerate)``; a zero-norm side gives ``p = 0`` and sets
    ``degenerate``.
    """
    if H.shape[-2:] != anchors.shape:
        raise ShapeMismatch(f"node features {tuple(H.shape[-2:])} vs anchors {tuple(anchors.shape)}")
    hr, sr = F.relu(H), F.relu(anchors)
    num = (hr * sr).sum(-1)
    den_sq = (hr * hr).sum(-1) * (sr * sr).sum(-1)
    degenerate = den_sq <= 0
    den = torch.sqrt(torch.where(degenerate, torch.ones_like(den_sq), den_sq))
    p = torch.where(degenerate, torch.zeros_like(num), num / den).clamp(0.0, 1.0)
    return p, p >= threshold, degenerate


def pool_graph(H: torch.Tensor) -> torch.Tensor:
    return H.sum(dim=-2)


def project_and_fuse(h_b: torch.Tensor, H: torch.Tensor, h_g: torch.Tensor, proj: Projections):
    """Returns ``(h_ab, h_g', h_a', h_b')``.

    h_a is the node-mean of H'; h_a' weights the P rows of h_b' and the weighted
    sum (through ReLU) is h_ab.
    """
    if h_b.shape[-2] != proj.a.out_features:
        raise ShapeMismatch(f"{h_b.shape[-2]} positions cannot fuse with proj_dim {proj.a.out_features}")
    ha = F.relu(proj.a(H.mean(dim=-2)))
    hb = F.relu(proj.b(h_b))
    hg = F.relu(proj.g(h_g))
    h_ab = F.relu(torch.einsum("bp,bpk->bk", ha, hb))
    return h_ab, hg, ha, hb


def classify(h_ab: torch.Tensor, h_g: torch.Tensor, classifier: Classifier) -> torch.Tensor:
    if h_ab.shape[-1] + h_g.shape[-1] != classifier.fc.in_features:
        raise ShapeMismatch("classifier input width mismatch")
    return classifier.fc(torch.cat([h_ab, h_g], dim=-1))


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    probs: Optional[torch.Tensor] = None
    bits: Optional[torch.Tensor] = None
    degenerate: Optional[torch.Tensor] = None
    intermediates: dict = field(default_factory=dict)


# ---------------------------------------------------------------- module

REPRESENTATION_PREFIXES = ("backbone.", "au.", "gnn.")


class GraphAUPain(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        c = config
        self.backbone = DeskBackbone(c.desk_widths, c.channels) if c.backbone == "desk" else PaperBackbone()
        self.au = AUBranch(c.n_au, c.d_au, c.channels)
        self.gnn = GraphConv(c.d_au)
        self.proj = Projections(c.channels, c.d_au, c.proj_dim)
        self.classifier = Classifier(2 * c.proj_dim, c.d_pain)
        self.baseline = Classifier(c.channels, c.d_pain)
        self.threshold = 0.5
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0, prefixes=None) -> None:
        """Seeded re-initialisation; ``prefixes`` limits it to matching submodules."""
        gen = torch.Generator().manual_seed(int(seed))

        def wanted(name):
            return prefixes is None or any(name.startswith(p) for p in prefixes)

        for name, mod in self.named_modules():
            name = name + "."
            if not wanted(name):
                continue
            if isinstance(mod, (nn.Linear, nn.Conv2d)):
                fan_in = mod.weight[0].numel()
                _init_affine(mod.weight, mod.bias, fan_in, gen)
            elif isinstance(mod, nn.BatchNorm1d) or isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
            elif isinstance(mod, AUHeads):
                _init_affine(mod.weight, mod.bias, mod.weight.shape[-1], gen)
            elif isinstance(mod, Anchors):
                with torch.no_grad():
                    s = torch.randn(mod.weight.shape, generator=gen, dtype=mod.weight.dtype).abs()
                    mod.weight.copy_(s / s.norm(dim=-1, keepdim=True))

    def representation_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(REPRESENTATION_PREFIXES)]

    def forward(self, images: torch.Tensor, keep: bool = False) -> ForwardOutput:
        c = self.config
        h_b = backbone_forward(self.backbone, images, c.image_side)
        if c.ablation == "backbone_only":
            logits = self.baseline.fc(h_b.mean(dim=-2))
            return ForwardOutput(logits, intermediates={"h_b": h_b} if keep else {})
        H = au_node_features(h_b, self.au.heads.weight, self.au.heads.bias)
        if c.ablation == "no_gnn":
            A = None
            H2 = F.relu(H)
        else:
            A = build_knn_graph(H, c.k)
            H2 = gnn_forward(H, A, self.gnn)
        p, bits, degenerate = au_occurrence_probs(H2, self.au.anchors.weight, self.threshold)
        h_g = pool_graph(H2)
        h_ab, hg, ha, hb = project_and_fuse(h_b, H2, h_g, self.proj)
        if c.ablation == "no_graph_rep":
            hg = torch.zeros_like(hg)
        logits = classify(h_ab, hg, self.classifier)
        inter = {}
        if keep:
            inter = dict(h_b=h_b, H_a=H, A=A, H_a2=H2, h_g=h_g, h_a2=ha, h_b2=hb, h_g2=hg, h_ab=h_ab)
        return ForwardOutput(logits, p, bits, degenerate, inter)

    def au_forward(self, images: torch.Tensor):
        """AU branch only: occurrence probabilities, bits and degeneracy flags."""
        c = self.config
        h_b = backbone_forward(self.backbone, images, c.image_side)
        H = au_node_features(h_b, self.au.heads.weight, self.au.heads.bias)
        if c.ablation == "no_gnn":
            H2 = F.relu(H)
        else:
            H2 = gnn_forward(H, build_knn_graph(H, c.k), self.gnn)
        return au_occurrence_probs(H2, self.au.anchors.weight, self.threshold)


def forward(images, model: GraphAUPain, mode: str = "eval", keep: bool = True) -> ForwardOutput:
    """Run ``model`` in ``mode`` ("train" or "eval").  Accepts NCHW or NHWC/HWC arrays."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = torch.as_tensor(images)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() == 4 and x.shape[1] != 3 and x.shape[-1] == 3:
        x = x.permute(0, 3, 1, 2)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(x, keep=keep)
    return model(x, keep=keep)
