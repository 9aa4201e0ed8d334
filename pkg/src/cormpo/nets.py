"""Shared neural-network building blocks (torch, float64, CPU).

Every stochastic element (init, dropout masks, minibatch order) runs off an
explicit seeded generator, never global RNG state, so training runs and
Monte Carlo passes are reproducible and parallel/serial execution agree.
Dropout uses inverted scaling in both training and sampling mode, so the
expected forward pass equals the mask-free forward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


def derive_seed(base: int, *extra: int) -> int:
    """Stable 63-bit seed derived from a base seed and a key path."""
    ss = np.random.SeedSequence(entropy=int(base) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(e) for e in extra))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def init_linear(layer: nn.Linear, gen: torch.Generator, zero: bool = False) -> nn.Linear:
    """Seeded uniform fan-in init (or exact zeros for output heads)."""
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
            if layer.bias is not None:
                layer.bias.zero_()
        else:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=gen)
            if layer.bias is not None:
                layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def linear(in_features: int, out_features: int, gen: torch.Generator, zero: bool = False) -> nn.Linear:
    layer = nn.Linear(in_features, out_features, dtype=DTYPE)
    return init_linear(layer, gen, zero=zero)


def seeded_dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout with an explicit generator; identity when gen is None."""
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


class MLP(nn.Module):
    """ReLU MLP with optional dropout after each hidden activation."""

    def __init__(
        self,
        in_features: int,
        hidden: Sequence[int],
        out_features: int,
        gen: torch.Generator,
        dropout_p: float = 0.0,
        zero_output: bool = False,
    ) -> None:
        super().__init__()
        self.dropout_p = float(dropout_p)
        dims = [in_features, *hidden]
        self.hidden_layers = nn.ModuleList(
            linear(dims[i], dims[i + 1], gen) for i in range(len(dims) - 1)
        )
        self.output_layer = linear(dims[-1], out_features, gen, zero=zero_output)

    def forward(self, x: torch.Tensor, dropout_gen: torch.Generator | None = None) -> torch.Tensor:
        for layer in self.hidden_layers:
            x = torch.relu(layer(x))
            x = seeded_dropout(x, self.dropout_p, dropout_gen)
        return self.output_layer(x)


def sinusoidal_positional_encoding(n_positions: int, dim: int) -> torch.Tensor:
    """Deterministic, input-independent sin/cos position table (n_positions, dim)."""
    position = torch.arange(n_positions, dtype=DTYPE).unsqueeze(1)
    even = torch.arange(0, dim, 2, dtype=DTYPE)
    div = torch.exp(-math.log(10000.0) * even / dim)
    pe = torch.zeros(n_positions, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe


class SelfAttentionEncoderLayer(nn.Module):
    """Post-norm transformer encoder layer with explicit multi-head attention."""

    def __init__(self, model_dim: int, n_heads: int, ff_dim: int, gen: torch.Generator) -> None:
        super().__init__()
        if model_dim % n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.qkv = linear(model_dim, 3 * model_dim, gen)
        self.proj = linear(model_dim, model_dim, gen)
        self.ff1 = linear(model_dim, ff_dim, gen)
        self.ff2 = linear(ff_dim, model_dim, gen)
        self.norm1 = nn.LayerNorm(model_dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(model_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output (B, T, D), attention probabilities (B, H, T, T))."""
        batch, seq, dim = x.shape
        qkv = self.qkv(x).reshape(batch, seq, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)  # each (B, T, H, Dh)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(batch, seq, dim)
        x = self.norm1(x + self.proj(mixed))
        x = self.norm2(x + self.ff2(torch.relu(self.ff1(x))))
        return x, attn


def flatten_state_dict(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in module.state_dict().items()}


def load_state_dict_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {
        k[len(prefix):]: torch.as_tensor(v, dtype=DTYPE)
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state)


def finite_difference_grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-6,
) -> float:
    """Global relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic pure function of ``params``.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1).clone()
        for p in params
    ])
    numeric = torch.empty_like(analytic)
    offset = 0
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                hi = loss_fn().item()
                flat[i] = original - step
                lo = loss_fn().item()
                flat[i] = original
                numeric[offset] = (hi - lo) / (2.0 * step)
                offset += 1
    diff = torch.linalg.vector_norm(analytic - numeric).item()
    scale = max(
        torch.linalg.vector_norm(analytic).item(),
        torch.linalg.vector_norm(numeric).item(),
        1e-12,
    )
    return diff / scale
