"""Uncertainty-guided hypergraph refinement block.

Nodes are the h*w feature vectors of one scale, flattened row-major so that
node n = row * w + col lines up with the flattened uncertainty map. Hyperedges
are 2M prototypes (M foreground-conditioned, then M background-conditioned);
soft node membership is the column-wise softmax of the uncertainty-amplified
node/prototype logits.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .layers import Conv2d, Linear, Module, Parameter
from .tensor_core import (Tensor, add, clip, concat, matmul, mul, ones, power_of_two, reduce_mean,
                          relu, reshape, scalar_mul, silu, slice_axis, softmax, stack, sub,
                          transpose)
from .uncertainty import entropy_uncertainty
from .uoic import wmap

logger = logging.getLogger(__name__)

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {"silu": silu, "relu": relu}
MIN_CONTEXT_WEIGHT = 1e-6
COLUMN_TOLERANCE = 1e-9


@dataclass
class BlockConfig:
    """Per-scale UGHR settings; the three flags are the ablation switches."""
    channels: int
    prototypes: int = 8
    beta: float = 1.0
    dilations: Tuple[int, ...] = (1, 2)
    base_hr: bool = True
    unc_guidance: bool = True
    fgbg_groups: bool = True
    activation: str = "silu"
    detach_uncertainty: bool = False
    eps: float = 1e-8
    debug: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.prototypes < 1:
            raise ConfigError(f"prototypes (M) must be >= 1, got {self.prototypes}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.dilations or any(r < 1 for r in self.dilations):
            raise ConfigError(f"dilation rates must be >= 1, got {self.dilations}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")

    @property
    def act(self) -> Callable[[Tensor], Tensor]:
        return ACTIVATIONS[self.activation]


def nodes_of(d: Tensor) -> Tensor:
    """D x h x w feature map to the N x D node matrix (row-major node order)."""
    depth, h, w = d.shape
    return transpose(reshape(d, (depth, h * w)))


def map_of(x: Tensor, h: int, w: int) -> Tensor:
    return reshape(transpose(x), (x.shape[1], h, w))


def global_context(d: Tensor) -> Tensor:
    depth, h, w = d.shape
    return reduce_mean(reshape(d, (depth, h * w)), axis=1)


def mce_contexts(d: Tensor, m_hat: Tensor) -> Tuple[Tensor, Tensor]:
    """Mask-guided soft pooling: c_FG with weights M_hat, c_BG with 1 - M_hat.

    A side whose weights sum below 1e-6 falls back to the global mean.
    """
    if m_hat.shape != d.shape[1:]:
        raise ShapeError(f"guidance map {m_hat.shape} does not match features {d.shape}")
    m_hat = clip(m_hat, 0.0, 1.0)
    contexts = []
    for weights in (m_hat, sub(1.0, m_hat)):
        vector, total = wmap(d, weights)
        if total < MIN_CONTEXT_WEIGHT:
            vector = global_context(d)
        contexts.append(vector)
    return contexts[0], contexts[1]


class ContextInteraction(Module):
    """Single-head attention of each context over the token pair [c_FG; c_BG], plus residual.

    Query/key/value projections are shared by both directions. The value map
    starts at zero so the interaction is the identity at initialisation.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng, zero_init=True)
        self.scale = 1.0 / math.sqrt(channels)

    def __call__(self, c_fg: Tensor, c_bg: Tensor) -> Tuple[Tensor, Tensor]:
        tokens = stack([c_fg, c_bg])
        scores = scalar_mul(matmul(self.query(tokens), transpose(self.key(tokens))), self.scale)
        attended = matmul(softmax(scores, axis=1), self.value(tokens))
        out = add(tokens, attended)
        depth = tokens.shape[1]
        return (reshape(slice_axis(out, 0, 0, 1), (depth,)),
                reshape(slice_axis(out, 0, 1, 2), (depth,)))


class PrototypeBank(Module):
    """Global hyperedge bases plus zero-initialised context-conditioned offset generators.

    Grouped: two M x D bases, one offset generator per group. Shared: a single
    2M x D base whose offsets come from one generator fed by the global context.
    """

    def __init__(self, channels: int, prototypes: int, rng: np.random.Generator, grouped: bool = True):
        self.channels = channels
        self.prototypes = prototypes
        self.grouped = grouped
        std = 1.0 / math.sqrt(channels)
        if grouped:
            self.base_fg = Parameter(rng.normal(0.0, std, size=(prototypes, channels)))
            self.base_bg = Parameter(rng.normal(0.0, std, size=(prototypes, channels)))
            self.offset_fg = Linear(channels, prototypes * channels, rng, zero_init=True)
            self.offset_bg = Linear(channels, prototypes * channels, rng, zero_init=True)
        else:
            self.base = Parameter(rng.normal(0.0, std, size=(2 * prototypes, channels)))
            self.offset = Linear(channels, 2 * prototypes * channels, rng, zero_init=True)

    def _offsets(self, generator: Linear, context: Tensor, rows: int) -> Tensor:
        return reshape(generator(reshape(context, (1, self.channels))), (rows, self.channels))

    def dynamic_prototypes(self, c_fg: Tensor, c_bg: Tensor) -> Tensor:
        """P = concat(P^g_FG + dP_FG, P^g_BG + dP_BG); rows 0..M-1 are foreground."""
        if not self.grouped:
            raise ContractError("shared prototype bank has no foreground/background groups")
        m = self.prototypes
        p_fg = add(self.base_fg, self._offsets(self.offset_fg, c_fg, m))
        p_bg = add(self.base_bg, self._offsets(self.offset_bg, c_bg, m))
        return concat([p_fg, p_bg], axis=0)

    def shared_prototypes(self, context: Tensor) -> Tensor:
        if self.grouped:
            raise ContractError("grouped prototype bank needs separate foreground and background contexts")
        return add(self.base, self._offsets(self.offset, context, 2 * self.prototypes))


def participation(x: Tensor, prototypes: Tensor, u: Optional[Tensor], beta: float,
                  unc_enabled: bool) -> Tensor:
    """S = column softmax over nodes of z' where z = X P^T / sqrt(D) and z' = z * 2^(beta u_n)."""
    nodes, depth = x.shape
    if prototypes.shape[1] != depth:
        raise ShapeError(f"prototypes {prototypes.shape} do not match node features {x.shape}")
    z = scalar_mul(matmul(x, transpose(prototypes)), 1.0 / math.sqrt(depth))
    if unc_enabled and u is not None:
        if u.size != nodes:
            raise ShapeError(f"uncertainty map has {u.size} entries for {nodes} nodes")
        column = reshape(u, (nodes, 1))
        spread = matmul(column, ones((1, prototypes.shape[0])))
        z = mul(z, power_of_two(scalar_mul(spread, beta)))
    return softmax(z, axis=0)


def check_columns(s: Tensor) -> None:
    error = float(np.max(np.abs(s.data.sum(axis=0) - 1.0)))
    if error > COLUMN_TOLERANCE:
        raise ContractError(f"participation columns deviate from 1 by {error:.3e}")


def hyperedge_features(x: Tensor, s: Tensor) -> Tensor:
    """H_e = S^T X: each hyperedge gathers its members."""
    return matmul(transpose(s), x)


def hypergraph_message_pass(x: Tensor, s: Tensor, phi_e: Callable[[Tensor], Tensor],
                            phi_n: Callable[[Tensor], Tensor]) -> Tensor:
    """Node -> hyperedge -> node: X + phi_n(S phi_e(S^T X))."""
    edges = phi_e(hyperedge_features(x, s))
    return add(x, phi_n(matmul(s, edges)))


class IRefinementBranch(ABC):
    """Long-range branch of a UGHR block: D x h x w in, D x h x w out."""

    @abstractmethod
    def __call__(self, d: Tensor, m_hat: Tensor, u: Optional[Tensor],
                 capture: Optional[dict] = None) -> Tensor:
        pass


class HypergraphBranch(Module, IRefinementBranch):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        depth = cfg.channels
        if cfg.fgbg_groups:
            self.interaction = ContextInteraction(depth, rng)
        self.bank = PrototypeBank(depth, cfg.prototypes, rng, grouped=cfg.fgbg_groups)
        self.edge_map = Linear(depth, depth, rng)
        self.node_map = Linear(depth, depth, rng, zero_init=True)

    def prototypes_for(self, d: Tensor, m_hat: Tensor) -> Tensor:
        if self.cfg.fgbg_groups:
            c_fg, c_bg = mce_contexts(d, m_hat)
            return self.bank.dynamic_prototypes(*self.interaction(c_fg, c_bg))
        return self.bank.shared_prototypes(global_context(d))

    def __call__(self, d: Tensor, m_hat: Tensor, u: Optional[Tensor],
                 capture: Optional[dict] = None) -> Tensor:
        _, h, w = d.shape
        x = nodes_of(d)
        prototypes = self.prototypes_for(d, m_hat)
        s = participation(x, prototypes, u, self.cfg.beta, self.cfg.unc_guidance)
        if self.cfg.debug:
            check_columns(s)
        if capture is not None:
            capture["S"] = s.data.copy()
            capture["P"] = prototypes.data.copy()
        act = self.cfg.act
        x_hg = hypergraph_message_pass(x, s, lambda e: act(self.edge_map(e)), self.node_map)
        return map_of(x_hg, h, w)


def hypergraph_parameter_count(cfg: BlockConfig) -> int:
    """Parameters a HypergraphBranch built from ``cfg`` would hold."""
    depth, m = cfg.channels, cfg.prototypes
    linear = depth * depth + depth
    if cfg.fgbg_groups:
        bank = 2 * m * depth + 2 * (depth * m * depth + m * depth)
        return 3 * linear + bank + 2 * linear
    bank = 2 * m * depth + depth * 2 * m * depth + 2 * m * depth
    return bank + 2 * linear


def substitute_width(cfg: BlockConfig) -> int:
    """Hidden filters of the conv substitute; one filter costs 9D + 1 + D parameters."""
    depth = cfg.channels
    per_filter = 10 * depth + 1
    return max(1, round((hypergraph_parameter_count(cfg) - depth) / per_filter))


class ConvSubstituteBranch(Module, IRefinementBranch):
    """Residual conv stand-in for the hypergraph branch with a matched parameter count.

    d + proj(act(conv3x3(d))); the 1 x 1 projection starts at zero like the
    hypergraph node map, and the hidden width is chosen so the total lands
    within one hidden filter of ``hypergraph_parameter_count``.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        width = substitute_width(cfg)
        self.conv = Conv2d(cfg.channels, width, 3, rng)
        self.proj = Conv2d(width, cfg.channels, 1, rng, zero_init=True)
        self.act = cfg.act

    def __call__(self, d: Tensor, m_hat: Tensor, u: Optional[Tensor],
                 capture: Optional[dict] = None) -> Tensor:
        return add(d, self.proj(self.act(self.conv(d))))


class DilatedConvBranch(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.convs = [Conv2d(cfg.channels, cfg.channels, 3, rng, dilation=rate) for rate in cfg.dilations]
        self.act = cfg.act

    def __call__(self, d: Tensor) -> Tensor:
        out = d
        for conv in self.convs:
            out = self.act(conv(out))
        return out


class UGHRBlock(Module):
    """e_i = F^hg + F^conv, fused by elementwise addition."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        branch = HypergraphBranch if cfg.base_hr else ConvSubstituteBranch
        self.hypergraph = branch(cfg, rng)
        self.local = DilatedConvBranch(cfg, rng)

    def uncertainty(self, m_hat: Tensor) -> Optional[Tensor]:
        if not (self.cfg.base_hr and self.cfg.unc_guidance):
            return None
        source = m_hat.detach() if self.cfg.detach_uncertainty else m_hat
        return entropy_uncertainty(clip(source, 0.0, 1.0), self.cfg.eps)

    def __call__(self, d: Tensor, m_hat: Tensor, capture: Optional[dict] = None) -> Tensor:
        if d.ndim != 3 or d.shape[0] != self.cfg.channels:
            raise ShapeError(f"UGHR block expects {self.cfg.channels} x h x w features, got {d.shape}")
        if m_hat.shape != d.shape[1:]:
            raise ShapeError(f"guidance map {m_hat.shape} does not match features {d.shape}")
        f_hg = self.hypergraph(d, m_hat, self.uncertainty(m_hat), capture)
        f_conv = self.local(d)
        return add(f_hg, f_conv)
