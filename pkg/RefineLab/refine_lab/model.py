#!/usr/bin/env python3
# model.py

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import ModelConfig
from .errors import InputError
from .paths import tau_true
from .tasks import PuzzleInstance

logger = logging.getLogger(__name__)

LOGIT_CLIP = 50.0


@dataclass
class ModelOutput:
    logits: torch.Tensor                        # (B, d, N), mask excluded
    confidence: Optional[torch.Tensor] = None   # (B, d)
    tau: Optional[torch.Tensor] = None          # (B,)

    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=-1)

    def select(self, rows: torch.Tensor) -> "ModelOutput":
        return ModelOutput(
            logits=self.logits[rows],
            confidence=None if self.confidence is None else self.confidence[rows],
            tau=None if self.tau is None else self.tau[rows],
        )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of (scaled) time, shape (B, dim)"""
    half = dim // 2
    exponent = -math.log(10_000.0) * torch.arange(half, device=t.device, dtype=t.dtype) / max(half - 1, 1)
    args = t.unsqueeze(1) * torch.exp(exponent).unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class RotaryEmbedding(nn.Module):
    def __init__(self, head_dim: int, seq_len: int, base: float = 10_000.0):
        super().__init__()
        inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.get_default_dtype()) / head_dim))
        freqs = torch.outer(torch.arange(seq_len, dtype=inv_freq.dtype), inv_freq)
        emb = torch.cat([freqs, freqs], dim=-1)
        self.register_buffer("cos", emb.cos(), persistent=False)
        self.register_buffer("sin", emb.sin(), persistent=False)

    def forward(self, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.cos.to(like.dtype), self.sin.to(like.dtype)


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat((-x2, x1), dim=-1)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + rotate_half(x) * sin


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.dropout = cfg.dropout
        self.qkv = nn.Linear(cfg.hidden_dim, 3 * cfg.hidden_dim)
        self.proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b s (three h e) -> three b h s e", three=3, h=self.n_heads)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        out = F.scaled_dot_product_attention(q, k, v, dropout_p=self.dropout if self.training else 0.0)
        return self.drop(self.proj(rearrange(out, "b h s e -> b s (h e)")))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.ffn_ratio * cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_ratio * cfg.hidden_dim, cfg.hidden_dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AdaLNBlock(nn.Module):
    """Time enters through shift/scale/gate modulation of both sublayers"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim, elementwise_affine=False)
        self.attn = Attention(cfg)
        self.ffn = FeedForward(cfg)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cfg.hidden_dim, 6 * cfg.hidden_dim))

    def forward(self, x, cond, cos, sin):
        shift1, scale1, gate1, shift2, scale2, gate2 = rearrange(
            self.modulation(cond), "b (six d) -> six b 1 d", six=6
        )
        x = x + gate1 * self.attn(self.norm1(x) * (1 + scale1) + shift1, cos, sin)
        return x + gate2 * self.ffn(self.norm2(x) * (1 + scale2) + shift2)


class PreNormBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.attn = Attention(cfg)
        self.ffn = FeedForward(cfg)

    def forward(self, x, cond, cos, sin):
        x = x + self.attn(self.norm1(x), cos, sin)
        return x + self.ffn(self.norm2(x))


def _mlp(in_dim: int, hidden_dim: int, out_dim: int, layers: int) -> nn.Sequential:
    dims = [in_dim] + [hidden_dim] * (layers - 1) + [out_dim]
    modules = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if i:
            modules.append(nn.GELU())
        modules.append(nn.Linear(a, b))
    return nn.Sequential(*modules)


class TimeHead(nn.Module):
    """Attention-pooled sequence -> MLP -> sigmoid progress estimate"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.score = nn.Linear(cfg.hidden_dim, 1)
        self.mlp = _mlp(cfg.hidden_dim, cfg.head_hidden_dim, 1, 2)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        weights = F.softmax(self.score(h).squeeze(-1), dim=-1)
        pooled = torch.einsum("bs,bsd->bd", weights, h)
        return torch.sigmoid(self.mlp(pooled).squeeze(-1))


class MixingHead(nn.Module):
    """Per-position confidence from the token state and a clue-excluded context"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.score = nn.Linear(cfg.hidden_dim, 1)
        self.mlp = _mlp(2 * cfg.hidden_dim, cfg.head_hidden_dim, 1, cfg.head_layers)

    def forward(self, h: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
        scores = self.score(h).squeeze(-1).masked_fill(clues, -1e9)
        pooled = torch.einsum("bs,bsd->bd", F.softmax(scores, dim=-1), h)
        ctx = pooled.unsqueeze(1).expand_as(h)
        return torch.sigmoid(self.mlp(torch.cat([h, ctx], dim=-1)).squeeze(-1))


class RefineTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        """
        Initialize the denoising transformer

        Args:
            cfg: Resolved model block (vocab_size, seq_len and variant set).
                The baseline variant conditions on time through AdaLN and has
                only the denoiser head; the adaptive variant adds time to the
                input and carries the confidence and progress heads.
        """
        super().__init__()
        if cfg.vocab_size is None or cfg.seq_len is None or cfg.variant is None:
            raise InputError("ModelConfig must be resolved against a task before building a model")
        self.cfg = cfg
        self.variant = cfg.variant
        self.vocab_size = cfg.vocab_size
        self.seq_len = cfg.seq_len
        D = cfg.hidden_dim

        self.token_emb = nn.Embedding(cfg.vocab_size + 1, D)
        self.clue_emb = nn.Embedding(2, D)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.rope = RotaryEmbedding(D // cfg.n_heads, cfg.seq_len)

        block = AdaLNBlock if self.variant == "baseline" else PreNormBlock
        self.blocks = nn.ModuleList([block(cfg) for _ in range(cfg.n_blocks)])

        if self.variant == "baseline":
            self.final_norm = nn.LayerNorm(D, elementwise_affine=False)
            self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(D, 2 * D))
        else:
            self.final_norm = nn.LayerNorm(D)
            self.null_time = nn.Parameter(torch.zeros(D))
            self.time_head = TimeHead(cfg)
            self.mixing_head = MixingHead(cfg)
        self.out_head = nn.Linear(D, cfg.vocab_size)

        self.apply(self._init_weights)
        if self.variant == "baseline":
            for module in [b.modulation[-1] for b in self.blocks] + [self.final_modulation[-1]]:
                nn.init.zeros_(module.weight)
                nn.init.zeros_(module.bias)
        logger.debug(f"Built {self.variant} model with {self.num_parameters()} parameters")

    def _init_weights(self, module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_inputs(self, tokens: torch.Tensor, clues: torch.Tensor) -> None:
        if tokens.dim() != 2 or tokens.shape[1] != self.seq_len:
            raise InputError(f"Expected tokens of shape (B, {self.seq_len}), got {tuple(tokens.shape)}")
        if clues.shape != tokens.shape:
            raise InputError(f"Clue mask {tuple(clues.shape)} does not match tokens {tuple(tokens.shape)}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() > self.vocab_size):
            raise InputError("Token id outside the vocabulary")

    def _time_condition(self, t: Optional[Union[float, torch.Tensor]], batch: int,
                        like: torch.Tensor) -> torch.Tensor:
        if t is None:
            if self.variant == "baseline":
                raise InputError("The baseline variant needs a time input")
            return self.null_time.unsqueeze(0).expand(batch, -1)
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if t.dim() == 0:
            t = t.expand(batch)
        return self.time_mlp(timestep_embedding(t * 1000.0, self.cfg.hidden_dim))

    def forward(self, tokens: torch.Tensor, clues: torch.Tensor,
                t: Optional[Union[float, torch.Tensor]] = None) -> ModelOutput:
        self._check_inputs(tokens, clues)
        h = self.token_emb(tokens) + self.clue_emb(clues.long())
        cond = self._time_condition(t, tokens.shape[0], h)
        if self.variant == "adaptive":
            h = h + rearrange(cond, "b d -> b 1 d")

        cos, sin = self.rope(h)
        for block in self.blocks:
            h = block(h, cond, cos, sin)

        if self.variant == "baseline":
            shift, scale = rearrange(self.final_modulation(cond), "b (two d) -> two b 1 d", two=2)
            h = self.final_norm(h) * (1 + scale) + shift
            return ModelOutput(logits=self.out_head(h).clamp(-LOGIT_CLIP, LOGIT_CLIP))

        h = self.final_norm(h)
        return ModelOutput(
            logits=self.out_head(h).clamp(-LOGIT_CLIP, LOGIT_CLIP),
            confidence=self.mixing_head(h, clues),
            tau=self.time_head(h),
        )


class OracleModel(nn.Module):
    def __init__(self, instances: Sequence[PuzzleInstance], vocab_size: int,
                 confidence: float = 1.0, variant: str = "adaptive"):
        """
        Perfect-model fixture: one-hot logits on the solution, constant
        confidence and the true progress of the input state.

        Rows are matched to instances by their clue state, so any subset or
        permutation of a batch can be fed.
        """
        super().__init__()
        self.variant = variant
        self.vocab_size = vocab_size
        self.seq_len = instances[0].d if instances else 0
        self.confidence = confidence
        self._solutions: Dict[Tuple[int, ...], torch.Tensor] = {}
        for inst in instances:
            self._solutions[self._key(torch.as_tensor(inst.x0), torch.as_tensor(inst.clues))] = torch.as_tensor(inst.x1)

    @staticmethod
    def _key(tokens: torch.Tensor, clues: torch.Tensor) -> Tuple[int, ...]:
        return tuple(torch.where(clues, tokens, torch.full_like(tokens, -1)).tolist())

    def forward(self, tokens: torch.Tensor, clues: torch.Tensor,
                t: Optional[Union[float, torch.Tensor]] = None) -> ModelOutput:
        try:
            x1 = torch.stack([self._solutions[self._key(row, c)] for row, c in zip(tokens, clues)])
        except KeyError as e:
            raise InputError("OracleModel received an unknown clue state") from e
        dtype = torch.get_default_dtype()
        logits = (2.0 * F.one_hot(x1, self.vocab_size).to(dtype) - 1.0) * LOGIT_CLIP
        # Fully clued rows count as finished
        has_free = (~clues).any(-1)
        tau = torch.ones(tokens.shape[0], dtype=dtype)
        if has_free.any():
            tau[has_free] = tau_true(tokens[has_free], x1[has_free], clues[has_free])
        return ModelOutput(
            logits=logits,
            confidence=torch.full(tokens.shape, self.confidence, dtype=dtype),
            tau=tau,
        )
