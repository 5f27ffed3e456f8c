"""Trainable structure-to-attention biases.

Three bias families map node-pair structure to one additive attention score
per layer and head:

* SPD: a lookup table indexed by the shortest-path bucket.
* RRWP: a per-layer MLP over the K-step random-walk vector of the pair.
* Magnetic: a per-layer MLP over the real and imaginary parts of the
  basis-invariant spectral kernel ``V diag(phi(lambda)) V^H``.

Every family is exactly zero on the node diagonal, so tokens inside the same
node never receive a structural bias.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .features import StructuralFeatures


class ShapeMismatch(ValueError):
    pass


class BucketOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class BiasConfig:
    n_layers: int = 2
    n_heads: int = 4
    max_spd: int = 8
    rrwp_steps: int = 16
    rrwp_hidden: int = 64
    mag_q: float = 0.25
    mag_dim: int = 32
    deepset_hidden: int = 32
    mag_hidden: int = 64
    use_spd: bool = True
    use_rrwp: bool = True
    use_mag: bool = True
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "rrwp_steps", "rrwp_hidden", "mag_dim",
                     "deepset_hidden", "mag_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_spd < 2:
            raise ValueError("max_spd must be >= 2")
        if not 0.0 <= self.mag_q <= 0.5:
            raise ValueError("mag_q must lie in [0, 0.5]")

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp(n_in: int, n_hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.Softplus(), nn.Linear(n_hidden, n_out))


class BiasParameters(nn.Module):
    """All bias-related weights. Build with :func:`init_bias_params`."""

    def __init__(self, cfg: BiasConfig):
        super().__init__()
        self.cfg = cfg
        L, H = cfg.n_layers, cfg.n_heads
        self.spd_table = nn.Parameter(torch.zeros(L, H, cfg.max_spd + 1))
        pin = torch.ones(cfg.max_spd + 1)
        pin[0] = 0.0
        self.register_buffer("spd_pin", pin, persistent=False)
        self.rrwp_mlp = nn.ModuleList(
            _mlp(cfg.rrwp_steps, cfg.rrwp_hidden, H) for _ in range(L)
        )
        self.deepset_lift = nn.Linear(1, cfg.deepset_hidden)
        self.deepset_out = nn.Linear(2 * cfg.deepset_hidden, cfg.mag_dim)
        self.mag_mlp = nn.ModuleList(
            _mlp(2 * cfg.mag_dim, cfg.mag_hidden, H) for _ in range(L)
        )

    def spd_lookup(self) -> torch.Tensor:
        # bucket 0 is multiplied out so it can never carry a value or gradient
        return self.spd_table * self.spd_pin

    def family_parameters(self) -> dict[str, list[nn.Parameter]]:
        return {
            "spd": [self.spd_table],
            "rrwp": list(self.rrwp_mlp.parameters()),
            "mag": list(self.deepset_lift.parameters())
            + list(self.deepset_out.parameters())
            + list(self.mag_mlp.parameters()),
        }


def init_bias_params(
    cfg: BiasConfig, seed: int = 0, dtype: torch.dtype = torch.float64
) -> BiasParameters:
    """Deterministic initialization: uniform(+-scale/sqrt(fan_in)) affine weights, zero SPD table."""
    params = BiasParameters(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in params.modules():
            if isinstance(module, nn.Linear):
                bound = cfg.init_scale / np.sqrt(module.in_features)
                for p in (module.weight, module.bias):
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        params.spd_table.zero_()
    return params.to(dtype)


# -- feature tensors -------------------------------------------------------------

@dataclass
class FeatureTensors:
    """Torch views of :class:`StructuralFeatures` in a given dtype."""

    spd: torch.Tensor  # (N, N) long
    rrwp: torch.Tensor  # (N, N, K)
    eigvals: torch.Tensor  # (N,)
    vec_re: torch.Tensor  # (N, N)
    vec_im: torch.Tensor  # (N, N)

    @property
    def num_nodes(self) -> int:
        return self.spd.shape[0]

    @classmethod
    def from_features(cls, f: StructuralFeatures, dtype=torch.float64) -> "FeatureTensors":
        return cls(
            torch.as_tensor(f.spd, dtype=torch.long),
            torch.as_tensor(f.rrwp, dtype=dtype),
            torch.as_tensor(f.mag_eigvals, dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(f.mag_eigvecs.real), dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(f.mag_eigvecs.imag), dtype=dtype),
        )


def _as_tensors(f, dtype) -> FeatureTensors:
    if isinstance(f, FeatureTensors):
        return f
    return FeatureTensors.from_features(f, dtype)


def _zero_diagonal(x: torch.Tensor) -> torch.Tensor:
    """Set ``x[..., u, u]`` to exactly 0."""
    n = x.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=x.device)
    return torch.where(eye, torch.zeros((), dtype=x.dtype), x)


# -- the three families ------------------------------------------------------------

def spd_bias(spd: torch.Tensor, params: BiasParameters) -> torch.Tensor:
    """Gather the SPD table at every node pair -> ``(L, H, N, N)``."""
    spd = torch.as_tensor(spd, dtype=torch.long)
    n_buckets = params.cfg.max_spd + 1
    if spd.numel() and (spd.min() < 0 or spd.max() >= n_buckets):
        raise BucketOutOfRange(f"SPD buckets must lie in [0, {n_buckets})")
    return params.spd_lookup()[:, :, spd]


def rrwp_bias(rrwp: torch.Tensor, params: BiasParameters) -> torch.Tensor:
    out = torch.stack([mlp(rrwp).permute(2, 0, 1) for mlp in params.rrwp_mlp])
    return _zero_diagonal(out)


def deepset_phi(eigvals: torch.Tensor, params: BiasParameters) -> torch.Tensor:
    """Set-equivariant eigenvalue lift -> ``(N, d_mag)``.

    Row ``i`` sees its own lifted eigenvalue and the mean over the spectrum.
    """
    lifted = params.deepset_lift(eigvals[:, None])
    pooled = lifted.mean(dim=0, keepdim=True).expand_as(lifted)
    return F.softplus(params.deepset_out(torch.cat([lifted, pooled], dim=-1)))


def mag_kernel_parts(
    vec_re: torch.Tensor, vec_im: torch.Tensor, phi: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Real and imaginary parts of ``V diag(phi[:, c]) V^H`` for every channel ``c``."""
    # scaled[u, c, i] = V[u, i] * phi[i, c]; contracting i against V[v, i] gives (u, c, v)
    scaled_re = vec_re[:, None, :] * phi.T[None]
    scaled_im = vec_im[:, None, :] * phi.T[None]
    re = scaled_re @ vec_re.T + scaled_im @ vec_im.T
    im = scaled_im @ vec_re.T - scaled_re @ vec_im.T
    return re.permute(0, 2, 1), im.permute(0, 2, 1)


def mag_kernel(vecs, phi) -> torch.Tensor:
    """Complex kernel ``(N, N, d_mag)``; accepts a complex array or tensor of eigenvectors."""
    vecs = torch.as_tensor(vecs)
    phi = torch.as_tensor(phi)
    re, im = mag_kernel_parts(vecs.real.to(phi.dtype), vecs.imag.to(phi.dtype), phi)
    return torch.complex(re, im)


def mag_bias(kernel, params: BiasParameters) -> torch.Tensor:
    """``kernel`` is either a complex tensor or a ``(real, imag)`` pair."""
    if isinstance(kernel, tuple):
        re, im = kernel
    else:
        re, im = kernel.real, kernel.imag
    x = torch.cat([re, im], dim=-1)
    out = torch.stack([mlp(x).permute(2, 0, 1) for mlp in params.mag_mlp])
    return _zero_diagonal(out)


def assemble_node_bias(
    features, params: BiasParameters, dtype: torch.dtype | None = None
) -> torch.Tensor:
    """Sum of the enabled bias families -> ``(L, H, N, N)`` with an exactly-zero diagonal."""
    return assemble_node_bias_batch([features], params, dtype)[0]


def assemble_node_bias_batch(
    features: Sequence, params: BiasParameters, dtype: torch.dtype | None = None
) -> list[torch.Tensor]:
    """Node biases for many graphs; the pairwise MLPs run once over all pairs."""
    cfg = params.cfg
    if dtype is None:
        dtype = params.spd_table.dtype
    feats = [_as_tensors(f, dtype) for f in features]
    L, H = cfg.n_layers, cfg.n_heads
    sizes = [f.num_nodes for f in feats]
    for f in feats:
        n = f.num_nodes
        if (
            f.spd.shape != (n, n)
            or f.rrwp.shape[:2] != (n, n)
            or f.eigvals.shape != (n,)
            or f.vec_re.shape != (n, n)
        ):
            raise ShapeMismatch("feature arrays disagree on the node count")
        if cfg.use_rrwp and f.rrwp.shape[2] != cfg.rrwp_steps:
            raise ShapeMismatch(f"RRWP has {f.rrwp.shape[2]} steps, config expects {cfg.rrwp_steps}")

    out = [torch.zeros(L, H, n, n, dtype=dtype) for n in sizes]
    if cfg.use_spd:
        out = [o + spd_bias(f.spd, params) for o, f in zip(out, feats)]
    if cfg.use_rrwp:
        flat = torch.cat([f.rrwp.reshape(-1, f.rrwp.shape[-1]) for f in feats])
        per_layer = torch.stack([mlp(flat) for mlp in params.rrwp_mlp])  # (L, P, H)
        out = _add_pairwise(out, per_layer, sizes)
    if cfg.use_mag:
        parts = []
        for f in feats:
            phi = deepset_phi(f.eigvals, params)
            re, im = mag_kernel_parts(f.vec_re, f.vec_im, phi)
            parts.append(torch.cat([re, im], dim=-1).reshape(-1, 2 * cfg.mag_dim))
        flat = torch.cat(parts)
        per_layer = torch.stack([mlp(flat) for mlp in params.mag_mlp])
        out = _add_pairwise(out, per_layer, sizes)
    return out


def _add_pairwise(out, per_layer: torch.Tensor, sizes) -> list[torch.Tensor]:
    res, start = [], 0
    L, _, H = per_layer.shape
    for o, n in zip(out, sizes):
        block = per_layer[:, start:start + n * n].reshape(L, n, n, H).permute(0, 3, 1, 2)
        res.append(o + _zero_diagonal(block))
        start += n * n
    return res


def broadcast_to_tokens(node_bias: torch.Tensor, node_index) -> torch.Tensor:
    """Expand ``(..., N, N)`` node biases to ``(..., T, T)`` token biases.

    ``node_index[i]`` is the node that token ``i`` belongs to.
    """
    idx = torch.as_tensor(node_index, dtype=torch.long)
    return node_bias[..., idx[:, None], idx[None, :]]


def count_parameters(cfg: BiasConfig) -> dict[str, int]:
    """Closed-form trainable-parameter counts (pinned SPD bucket excluded)."""
    L, H = cfg.n_layers, cfg.n_heads

    def affine(n_in, n_out):
        return n_in * n_out + n_out

    spd = L * H * cfg.max_spd if cfg.use_spd else 0
    rrwp = (
        L * (affine(cfg.rrwp_steps, cfg.rrwp_hidden) + affine(cfg.rrwp_hidden, H))
        if cfg.use_rrwp
        else 0
    )
    mag = 0
    if cfg.use_mag:
        mag = affine(1, cfg.deepset_hidden) + affine(2 * cfg.deepset_hidden, cfg.mag_dim)
        mag += L * (affine(2 * cfg.mag_dim, cfg.mag_hidden) + affine(cfg.mag_hidden, H))
    return {"spd": spd, "rrwp": rrwp, "mag": mag, "total": spd + rrwp + mag}
