"""Desk-scale decoder transformer with graph-aware attention.

Node texts are flattened into one token stream (prefix nodes in a chosen
order, target node last). Rotary positions restart at zero inside each node,
the prefix attends bidirectionally, the target is causal, and node-pair
structural biases are broadcast to every token pair.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .bias import (
    BiasConfig,
    BiasParameters,
    FeatureTensors,
    ShapeMismatch,
    assemble_node_bias_batch,
    broadcast_to_tokens,
    init_bias_params,
)
from .features import StructuralFeatures, compute_features
from .graph import TextAttributedGraph, prompt_graph
from .tokenizer import EOS, PAD, VOCAB_SIZE, decode

MASK_VALUE = -1e30


class InvalidPermutation(ValueError):
    pass


class EmptyAnswerSpan(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 16
    d_model: int = 64
    d_ffn: int = 128
    vocab_size: int = VOCAB_SIZE
    rope_base: float = 10000.0
    max_seq_len: int = 2048
    bias: BiasConfig = field(default_factory=BiasConfig)

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary pairing")
        if (self.bias.n_layers, self.bias.n_heads) != (self.n_layers, self.n_heads):
            raise ValueError("bias config must match the layer and head counts")

    @classmethod
    def create(cls, n_layers=2, n_heads=4, d_head=16, d_ffn=128, **bias_kw) -> "ModelConfig":
        bias_fields = set(BiasConfig.__dataclass_fields__)
        model_kw = {k: bias_kw.pop(k) for k in list(bias_kw) if k not in bias_fields}
        bias = BiasConfig(n_layers=n_layers, n_heads=n_heads, **bias_kw)
        return cls(n_layers=n_layers, n_heads=n_heads, d_head=d_head,
                   d_model=n_heads * d_head, d_ffn=d_ffn, bias=bias, **model_kw)

    def with_bias(self, **kw) -> "ModelConfig":
        return replace(self, bias=replace(self.bias, **kw))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["bias"] = BiasConfig(**d["bias"])
        return cls(**d)


# -- layout and masking --------------------------------------------------------------

@dataclass
class TokenLayout:
    tokens: np.ndarray  # (T,) token ids
    node_index: np.ndarray  # (T,) graph node of each token
    position: np.ndarray  # (T,) position inside its node
    is_target: np.ndarray  # (T,) bool
    loss_mask: np.ndarray  # (T,) bool, tokens to be predicted
    node_order: list[int]  # serialization order of graph nodes
    # answer-token index -> candidate ids, when the loss is restricted to choices
    allowed: dict[int, tuple[int, ...]] | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def node_slices(self) -> dict[int, slice]:
        out, start = {}, 0
        for node in self.node_order:
            stop = start + int(np.sum(self.node_index == node))
            out[node] = slice(start, stop)
            start = stop
        return out


def build_layout(
    g: TextAttributedGraph,
    permutation: Sequence[int] | None = None,
    add_eos: bool | None = None,
    extra_target_tokens: Sequence[int] = (),
    choices: Sequence[str] | None = None,
) -> TokenLayout:
    """Flatten ``g`` with prefix nodes in ``permutation`` order and the target last.

    ``permutation`` lists the prefix node indices ``1..N-1`` in the order they
    are serialized (identity if omitted). When the graph carries a label, its
    tokens (plus an EOS token unless ``add_eos=False``) form the loss span.
    With ``choices``, each answer token is scored only against the tokens that
    keep the answer a prefix of some choice (the same set constrained decoding
    picks from); tokens forced by the choices are left out of the loss.
    """
    n = g.num_nodes
    if permutation is None:
        permutation = list(range(1, n))
    permutation = [int(p) for p in permutation]
    if sorted(permutation) != list(range(1, n)):
        raise InvalidPermutation(f"{permutation} is not a permutation of 1..{n - 1}")
    if add_eos is None:
        add_eos = g.label is not None

    tokens, node_index, position, is_target = [], [], [], []
    for node in permutation + [0]:
        ids = list(g.nodes[node].text)
        if node == 0:
            ids += list(extra_target_tokens)
            if add_eos:
                ids.append(EOS)
        tokens += ids
        node_index += [node] * len(ids)
        position += list(range(len(ids)))
        is_target += [node == 0] * len(ids)

    loss_mask = np.zeros(len(tokens), dtype=bool)
    allowed = None
    span = g.answer_span()
    if span is not None:
        offset = len(tokens) - (len(g.nodes[0].text) + len(extra_target_tokens) + int(add_eos))
        start, stop = offset + span[0], offset + span[1] + int(add_eos)
        loss_mask[start:stop] = True
        if choices:
            allowed = _choice_candidates(tokens[start:stop], choices, start)
            # forced tokens carry no decision (zero loss); dropping them keeps
            # every example's loss a mean over its actual choice points
            for t, ids in allowed.items():
                loss_mask[t] = len(ids) > 1
    return TokenLayout(
        np.array(tokens, dtype=np.int64),
        np.array(node_index, dtype=np.int64),
        np.array(position, dtype=np.int64),
        np.array(is_target, dtype=bool),
        loss_mask,
        permutation + [0],
        allowed,
    )


def _choice_candidates(answer: Sequence[int], choices: Sequence[str], start: int):
    encoded = [list(c.encode("utf-8")) + [EOS] for c in choices]
    answer = list(answer)
    if not any(c[:len(answer)] == answer for c in encoded):
        raise ValueError(f"label {decode(answer)!r} is not one of the choices {list(choices)}")
    out = {}
    for k in range(len(answer)):
        out[start + k] = tuple(sorted({c[k] for c in encoded if len(c) > k and c[:k] == answer[:k]}))
    return out


def build_mask(layout: TokenLayout) -> np.ndarray:
    """``visible[i, j]``: prefix is fully visible, target is causal, prefix never sees target."""
    tgt = layout.is_target
    t = len(tgt)
    causal = np.tril(np.ones((t, t), dtype=bool))
    return np.where(tgt[:, None], ~tgt[None, :] | causal, ~tgt[None, :])


def rope_rotate(x: torch.Tensor, positions, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive feature pairs ``(2m, 2m+1)`` by ``pos * base^(-2m/d)``."""
    d = x.shape[-1]
    pos = torch.as_tensor(positions, dtype=x.dtype)
    inv_freq = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    angle = pos[..., None] * inv_freq
    cos, sin = torch.cos(angle), torch.sin(angle)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return out.flatten(-2)


# -- network ----------------------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.attn_norm = RMSNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ffn_norm = RMSNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.d_ffn), nn.GELU(), nn.Linear(cfg.d_ffn, d))

    def attention(self, h, positions, mask, bias=None):
        """Pre-norm attention sub-layer with residual.

        ``h``: (B, T, D); ``mask``: (B, T, T) bool; ``bias``: (B, H, T, T) or None.
        Returns the new hidden state and the attention probabilities.
        """
        b, t, _ = h.shape
        nh, dh = self.cfg.n_heads, self.cfg.d_head
        x = self.attn_norm(h)

        def heads(y):
            return y.view(b, t, nh, dh).transpose(1, 2)

        pos = positions[:, None, :]
        q = rope_rotate(heads(self.wq(x)), pos, self.cfg.rope_base)
        k = rope_rotate(heads(self.wk(x)), pos, self.cfg.rope_base)
        v = heads(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if bias is not None:
            if bias.shape != scores.shape:
                raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != scores {tuple(scores.shape)}")
            scores = scores + bias
        scores = scores.masked_fill(~mask[:, None], MASK_VALUE)
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, t, nh * dh)
        return h + self.wo(out), probs

    def forward(self, h, positions, mask, bias=None):
        h, probs = self.attention(h, positions, mask, bias)
        return h + self.ffn(self.ffn_norm(h)), probs


class GtlmModel(nn.Module):
    def __init__(self, cfg: ModelConfig, bias_params: BiasParameters | None = None):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.bias = bias_params if bias_params is not None else BiasParameters(cfg.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def backbone_parameters(self) -> list[nn.Parameter]:
        bias_ids = {id(p) for p in self.bias.parameters()}
        return [p for p in self.parameters() if id(p) not in bias_ids]

    def forward_tokens(self, tokens, positions, mask, token_bias=None, capture=False, embeds=None):
        """Core pass over batched token streams.

        ``tokens``/``positions``: (B, T); ``mask``: (B, T, T);
        ``token_bias``: (B, L, H, T, T) or None for the bias-free backbone.
        """
        h = self.embed(tokens) if embeds is None else embeds
        maps = []
        for layer, block in enumerate(self.blocks):
            bias = None if token_bias is None else token_bias[:, layer]
            h, probs = block(h, positions, mask, bias)
            if capture:
                maps.append(probs)
        logits = self.lm_head(self.final_norm(h))
        return (logits, maps) if capture else logits

    def node_biases(self, features: Sequence) -> list[torch.Tensor]:
        return assemble_node_bias_batch(features, self.bias, self.dtype)


def init_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float64,
               backbone_std: float | None = None, embed_std: float = 0.1) -> GtlmModel:
    """Random backbone plus seeded bias parameters.

    Backbone matrices are normal with std ``1/sqrt(fan_in)`` and embeddings
    with ``embed_std``, unless ``backbone_std`` fixes one std for all of them.
    A small embedding keeps the residual stream dominated by the sub-layer
    outputs, so attention routing has a visible effect on the logits.
    """
    bias = init_bias_params(cfg.bias, seed=seed + 1, dtype=torch.float64)
    model = GtlmModel(cfg, bias)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("bias."):
                continue
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif p.dim() == 1:
                p.zero_()
            else:
                std = backbone_std
                if std is None:
                    std = embed_std if name == "embed.weight" else 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
    return model.to(dtype)


# -- single-graph and batched passes ----------------------------------------------

@dataclass
class Example:
    """A graph with its layout and structural features, ready for batching."""

    graph: TextAttributedGraph
    layout: TokenLayout
    features: StructuralFeatures
    _tensors: dict = field(default_factory=dict, repr=False)

    def feature_tensors(self, dtype) -> FeatureTensors:
        if dtype not in self._tensors:
            self._tensors[dtype] = FeatureTensors.from_features(self.features, dtype)
        return self._tensors[dtype]


def make_example(g, cfg: ModelConfig, permutation=None, features=None, **layout_kw) -> Example:
    if features is None:
        b = cfg.bias
        features = compute_features(g, b.max_spd, b.rrwp_steps, b.mag_q)
    return Example(g, build_layout(g, permutation, **layout_kw), features)


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T)
    positions: torch.Tensor  # (B, T)
    mask: torch.Tensor  # (B, T, T)
    loss_mask: torch.Tensor  # (B, T)
    lengths: list[int]
    examples: list[Example]
    allowed: torch.Tensor | None = None  # (B, T, vocab) candidate tokens per target


def collate(examples: Sequence[Example]) -> Batch:
    t_max = max(len(e.layout) for e in examples)
    b = len(examples)
    tokens = torch.full((b, t_max), PAD, dtype=torch.long)
    positions = torch.zeros((b, t_max), dtype=torch.long)
    mask = torch.zeros((b, t_max, t_max), dtype=torch.bool)
    loss_mask = torch.zeros((b, t_max), dtype=torch.bool)
    for i, e in enumerate(examples):
        t = len(e.layout)
        tokens[i, :t] = torch.from_numpy(e.layout.tokens)
        positions[i, :t] = torch.from_numpy(e.layout.position)
        mask[i, :t, :t] = torch.from_numpy(build_mask(e.layout))
        loss_mask[i, :t] = torch.from_numpy(e.layout.loss_mask)
        # padded query rows see themselves only, keeping softmax finite
        mask[i, range(t, t_max), range(t, t_max)] = True
    allowed = None
    if any(e.layout.allowed for e in examples):
        allowed = torch.ones((b, t_max, VOCAB_SIZE), dtype=torch.bool)
        for i, e in enumerate(examples):
            for t, ids in (e.layout.allowed or {}).items():
                allowed[i, t] = False
                allowed[i, t, list(ids)] = True
    return Batch(tokens, positions, mask, loss_mask, [len(e.layout) for e in examples],
                 list(examples), allowed)


def batch_token_bias(model: GtlmModel, batch: Batch) -> torch.Tensor | None:
    """Broadcast node biases of every example to padded ``(B, L, H, T, T)``."""
    cfg = model.cfg.bias
    if not (cfg.use_spd or cfg.use_rrwp or cfg.use_mag):
        return None
    dtype = model.dtype
    node_bias = model.node_biases([e.feature_tensors(dtype) for e in batch.examples])
    t_max = batch.tokens.shape[1]
    out = []
    for nb, e in zip(node_bias, batch.examples):
        tb = broadcast_to_tokens(nb, e.layout.node_index)
        pad = t_max - len(e.layout)
        out.append(F.pad(tb, (0, pad, 0, pad)) if pad else tb)
    return torch.stack(out)


def run_batch(model: GtlmModel, batch: Batch, use_bias: bool = True, capture: bool = False):
    bias = batch_token_bias(model, batch) if use_bias else None
    return model.forward_tokens(batch.tokens, batch.positions, batch.mask, bias, capture=capture)


def forward(g: TextAttributedGraph, permutation, model: GtlmModel, features=None,
            capture: bool = False, use_bias: bool = True):
    """Logits ``(T, vocab)`` for one graph serialized in ``permutation`` order.

    Returns ``(logits, layout)`` or ``(logits, layout, attention_maps)`` when
    ``capture`` is set; each map has shape ``(H, T, T)``.
    """
    ex = make_example(g, model.cfg, permutation, features)
    batch = collate([ex])
    out = run_batch(model, batch, use_bias=use_bias, capture=capture)
    if capture:
        logits, maps = out
        return logits[0], ex.layout, [m[0] for m in maps]
    return out[0], ex.layout


# -- objective and optimization -----------------------------------------------------

def loss(logits: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
    """Mean next-token NLL over the answer span of one layout."""
    mask = torch.as_tensor(layout.loss_mask)
    return batch_loss(logits[None], torch.as_tensor(layout.tokens)[None], mask[None])


def batch_loss(logits, tokens, loss_mask, allowed=None) -> torch.Tensor:
    """Average over examples of the per-example mean answer-token NLL.

    ``allowed`` (indexed by target token) restricts each softmax to candidates.
    """
    target_mask = loss_mask[:, 1:]
    counts = target_mask.sum(dim=1)
    if (counts == 0).any():
        raise EmptyAnswerSpan("every example needs at least one supervised token")
    logits = logits[:, :-1]
    if allowed is not None:
        logits = logits.masked_fill(~allowed[:, 1:], MASK_VALUE)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)
    per_example = (nll * target_mask).sum(dim=1) / counts
    return per_example.mean()


def batch_objective(model: GtlmModel, batch: Batch) -> torch.Tensor:
    logits = run_batch(model, batch)
    return batch_loss(logits, batch.tokens, batch.loss_mask, batch.allowed)


def gradients(model: GtlmModel, batch: Batch) -> dict[str, torch.Tensor]:
    """Exact gradients of the batch loss for every parameter (zeros where detached)."""
    model.zero_grad(set_to_none=True)
    value = batch_objective(model, batch)
    value.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


class Trainer:
    """Adam with separate learning rates for the backbone and the bias parameters."""

    def __init__(self, model: GtlmModel, lr: float, lr_bias: float,
                 betas=(0.9, 0.999), grad_clip: float | None = 1.0):
        if lr < 0 or lr_bias <= 0:
            raise ValueError("need lr >= 0 and lr_bias > 0")
        self.model = model
        self.grad_clip = grad_clip
        backbone = model.backbone_parameters()
        for p in backbone:
            p.requires_grad_(lr > 0)
        groups = [{"params": list(model.bias.parameters()), "lr": lr_bias}]
        if lr > 0:
            groups.append({"params": backbone, "lr": lr})
        self.optimizer = torch.optim.Adam(groups, betas=betas)

    def step(self, batch: Batch) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        value = batch_objective(self.model, batch)
        if not torch.isfinite(value):
            raise NonFiniteLoss(f"loss is {value.item()}")
        value.backward()
        if self.grad_clip is not None:
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, self.grad_clip)
        self.optimizer.step()
        return float(value.detach())


def train_step(model: GtlmModel, batch: Batch, lr: float, lr_bias: float,
               optimizer_state: Trainer | None = None) -> tuple[float, Trainer]:
    """One optimizer step; pass the returned trainer back in to keep moment estimates."""
    trainer = optimizer_state or Trainer(model, lr, lr_bias)
    return trainer.step(batch), trainer


def fit(model: GtlmModel, examples: Sequence[Example], epochs: int, lr: float, lr_bias: float,
        batch_size: int = 32, seed: int = 0, log=None) -> list[float]:
    """Shuffled minibatch training; returns the mean loss of each epoch."""
    trainer = Trainer(model, lr, lr_bias)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = collate([examples[i] for i in order[start:start + batch_size]])
            losses.append(trainer.step(batch))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    return history


# -- decoding ----------------------------------------------------------------------

def generate(model: GtlmModel, g: TextAttributedGraph, max_new_tokens: int = 16,
             choices: Sequence[str] | None = None, features=None) -> str:
    """Greedy continuation of the target text after ``" A: "``.

    Stops at a newline, EOS, or the token budget. With ``choices`` the argmax is
    restricted to tokens that keep the output a prefix of some choice.
    """
    g = prompt_graph(g) if g.label is not None else g
    if features is None:
        b = model.cfg.bias
        features = compute_features(g, b.max_spd, b.rrwp_steps, b.mag_q)
    encoded = [list(c.encode("utf-8")) for c in choices] if choices else None
    out: list[int] = []
    with torch.no_grad():
        node_bias = None
        for _ in range(max_new_tokens):
            ex = Example(g, build_layout(g, add_eos=False, extra_target_tokens=out), features)
            batch = collate([ex])
            if node_bias is None and _any_bias(model):
                node_bias = model.node_biases([ex.feature_tensors(model.dtype)])[0]
            bias = None if node_bias is None else broadcast_to_tokens(node_bias, ex.layout.node_index)[None]
            logits = model.forward_tokens(batch.tokens, batch.positions, batch.mask, bias)[0, -1]
            if encoded is not None:
                allowed = {c[len(out)] for c in encoded if len(c) > len(out) and c[:len(out)] == out}
                if any(c == out for c in encoded):
                    allowed.add(EOS)
                if not allowed:
                    break
                idx = torch.tensor(sorted(allowed))
                nxt = int(idx[torch.argmax(logits[idx])])
            else:
                nxt = int(torch.argmax(logits))
            if nxt in (EOS, ord("\n")):
                break
            out.append(nxt)
    return decode(out)


def _any_bias(model: GtlmModel) -> bool:
    b = model.cfg.bias
    return b.use_spd or b.use_rrwp or b.use_mag


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: GtlmModel) -> None:
    """Config header plus flat parameter arrays, in declaration order, as ``.npz``."""
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    header = json.dumps({"config": model.cfg.to_dict(), "order": list(arrays),
                         "dtype": str(model.dtype).replace("torch.", "")})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(header), **arrays)


def load_checkpoint(path: str | Path) -> GtlmModel:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        cfg = ModelConfig.from_dict(header["config"])
        dtype = getattr(torch, header["dtype"])
        model = GtlmModel(cfg).to(dtype)
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name in header["order"]:
                params[name].copy_(torch.from_numpy(data[name]))
    return model
