"""The U-shaped D-Former: patch embedding, four encoder stages, three decoder
stages with skip fusion, patch expanding and a per-voxel segmentation head.

Token order is row-major over the ``(d, h, w)`` patch grid everywhere.
Volumes are ``[channels, D, H, W]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .attention import AttentionParams, GridDims
from .blocks import (DpeParams, LinearParams, MlpParams, NormParams, ScopeModuleParams,
                     dpe_forward, gsm_forward, lsm_forward)
from .config import NUM_STAGES, ModelConfig
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, concat, permute, reshape

INIT_STD = 0.02


class StageTensor(NamedTuple):
    tokens: Tensor  # [d*h*w, C]
    grid: GridDims


@dataclass
class PairParams:
    lsm: ScopeModuleParams
    gsm: ScopeModuleParams


@dataclass
class StageParams:
    """One D-Former block: a DPE followed by alternating LSM/GSM pairs."""

    dpe: DpeParams
    pairs: list[PairParams]


@dataclass
class Model:
    config: ModelConfig
    seed: int
    embed: LinearParams
    encoder: list[StageParams]
    down: list[LinearParams]
    up: list[LinearParams]
    fuse: list[LinearParams]
    decoder: list[StageParams]
    expand: LinearParams
    head: LinearParams
    topology: dict = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for f in ("embed", "encoder", "down", "up", "fuse", "decoder", "expand", "head"):
            out.extend(_walk(getattr(self, f), f))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = {n for n, _ in named} ^ set(state)
        if missing:
            raise ContractError(f"state dict keys differ: {sorted(missing)[:5]}")
        for name, t in named:
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")


# construction ----------------------------------------------------------------

class _Init:
    def __init__(self, seed: int, scheme: str = "fixed"):
        self.rng = np.random.default_rng(seed)
        self.scheme = scheme

    def normal(self, *shape, fan_in: int) -> Tensor:
        """Truncated at two standard deviations; std 0.02 or ``1/sqrt(fan_in)``."""
        x = self.rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        std = INIT_STD if self.scheme == "fixed" else 1.0 / np.sqrt(fan_in)
        return Tensor(x * std, requires_grad=True)

    @staticmethod
    def const(value: float, *shape) -> Tensor:
        return Tensor(np.full(shape, float(value)), requires_grad=True)

    def linear(self, fan_in: int, fan_out: int) -> LinearParams:
        return LinearParams(self.normal(fan_in, fan_out, fan_in=fan_in), self.const(0.0, fan_out))

    def norm(self, c: int) -> NormParams:
        return NormParams(self.const(1.0, c), self.const(0.0, c))

    def scope(self, scope: str, c: int, heads: int, ratio: int, eps: float) -> ScopeModuleParams:
        norm1 = self.norm(c)
        q, k, v, o = (self.linear(c, c) for _ in range(4))
        attn = AttentionParams(heads, q.weight, q.bias, k.weight, k.bias,
                               v.weight, v.bias, o.weight, o.bias)
        norm2 = self.norm(c)
        mlp = MlpParams(self.linear(c, ratio * c), self.linear(ratio * c, c))
        return ScopeModuleParams(scope, norm1, attn, norm2, mlp, eps)

    def stage(self, cfg: ModelConfig, s: int) -> StageParams:
        c = cfg.stage_channels(s)
        dpe = DpeParams(self.normal(c, *cfg.dpe_kernel, fan_in=int(np.prod(cfg.dpe_kernel))),
                        self.const(0.0, c))
        pairs = [PairParams(self.scope("local", c, cfg.heads[s], cfg.mlp_ratio, cfg.ln_eps),
                            self.scope("global", c, cfg.heads[s], cfg.mlp_ratio, cfg.ln_eps))
                 for _ in range(cfg.depths[s])]
        return StageParams(dpe, pairs)


def stage_topology(cfg: ModelConfig, input_dims=None) -> dict:
    """Grid and channel width of every encoder and decoder stage."""
    enc = [(tuple(cfg.stage_grid(s, input_dims)), cfg.stage_channels(s)) for s in range(NUM_STAGES)]
    dec = {}
    for s in reversed(range(NUM_STAGES - 1)):
        g, c = enc[s + 1]
        dec[s] = (tuple(2 * n for n in g), c // 2)
    return {"encoder": enc, "decoder": [dec[s] for s in range(NUM_STAGES - 1)]}


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Deterministically initialise a model: truncated normal weights (cut at
    two standard deviations), zero biases, unit LayerNorm scales.

    ``cfg.init == "fixed"`` uses std 0.02 everywhere; ``"fan_in"`` uses
    ``1/sqrt(fan_in)`` per weight.
    """
    cfg.validate()
    topo = stage_topology(cfg)
    for s, (dec, enc) in enumerate(zip(topo["decoder"], topo["encoder"])):
        if dec != enc:
            raise ConfigurationError(f"decoder stage {s + 1} {dec} does not mirror encoder {enc}")
    init = _Init(seed, cfg.init)
    c = cfg.channels
    embed = init.linear(cfg.in_channels * int(np.prod(cfg.patch)), c)
    encoder, down = [], []
    for s in range(NUM_STAGES):
        encoder.append(init.stage(cfg, s))
        if s < NUM_STAGES - 1:
            cs = cfg.stage_channels(s)
            down.append(init.linear(8 * cs, 2 * cs))
    up, fuse, decoder = [], [], []
    for s in range(NUM_STAGES - 1):
        cs = cfg.stage_channels(s)
        up.append(init.linear(2 * cs, 8 * cs))
        fuse.append(init.linear(2 * cs, cs))
        decoder.append(init.stage(cfg, s))
    ch = cfg.decoder_channels
    expand = init.linear(c, int(np.prod(cfg.patch)) * ch)
    head = init.linear(ch, cfg.num_classes)
    return Model(cfg, seed, embed, encoder, down, up, fuse, decoder, expand, head, topo)


# layers ---------------------------------------------------------------------

def patch_embed(volume: Tensor, cfg: ModelConfig, params: LinearParams) -> StageTensor:
    """Split ``[in_ch, D, H, W]`` into non-overlapping patches and project each to C."""
    if volume.ndim != 4 or volume.shape[0] != cfg.in_channels:
        raise DimensionError(f"expected [{cfg.in_channels}, D, H, W] volume, got {volume.shape}")
    ci, dims = volume.shape[0], volume.shape[1:]
    pd, ph, pw = cfg.patch
    for axis, n, p in zip(("depth", "height", "width"), dims, cfg.patch):
        if n % p:
            raise ConfigurationError(f"input {axis} {n} is not divisible by patch extent {p}")
    grid = GridDims(dims[0] // pd, dims[1] // ph, dims[2] // pw)
    x = reshape(volume, (ci, grid.d, pd, grid.h, ph, grid.w, pw))
    x = permute(x, (1, 3, 5, 0, 2, 4, 6))
    x = reshape(x, (grid.size, ci * pd * ph * pw))
    return StageTensor(params(x), grid)


def downsample(s: StageTensor, proj: LinearParams) -> StageTensor:
    """Concatenate each 2x2x2 neighbourhood (8C wide) and project to 2C."""
    d, h, w = s.grid
    if d % 2 or h % 2 or w % 2:
        raise ConfigurationError(f"cannot downsample odd grid {tuple(s.grid)}")
    c = s.tokens.shape[1]
    x = reshape(s.tokens, (d // 2, 2, h // 2, 2, w // 2, 2, c))
    x = permute(x, (0, 2, 4, 1, 3, 5, 6))
    grid = GridDims(d // 2, h // 2, w // 2)
    return StageTensor(proj(reshape(x, (grid.size, 8 * c))), grid)


def upsample(s: StageTensor, proj: LinearParams) -> StageTensor:
    """Project C to 8 * C/2 and scatter into the 2x2x2 children: layout inverse of downsample."""
    c = s.tokens.shape[1]
    if c % 2:
        raise ConfigurationError(f"cannot halve odd channel width {c}")
    d, h, w = s.grid
    x = reshape(proj(s.tokens), (d, h, w, 2, 2, 2, c // 2))
    x = permute(x, (0, 3, 1, 4, 2, 5, 6))
    grid = GridDims(2 * d, 2 * h, 2 * w)
    return StageTensor(reshape(x, (grid.size, c // 2)), grid)


def skip_fuse(decoder: StageTensor, encoder: StageTensor, proj: LinearParams) -> StageTensor:
    """Channel-concatenate ``[decoder | encoder]`` and project back to the decoder width."""
    if tuple(decoder.grid) != tuple(encoder.grid) or decoder.tokens.shape != encoder.tokens.shape:
        raise DimensionError(
            f"skip mismatch: decoder {tuple(decoder.grid)}/{decoder.tokens.shape} "
            f"vs encoder {tuple(encoder.grid)}/{encoder.tokens.shape}")
    return StageTensor(proj(concat([decoder.tokens, encoder.tokens], axis=1)), decoder.grid)


def patch_expand_head(s: StageTensor, cfg: ModelConfig, expand: LinearParams,
                      head: LinearParams) -> Tensor:
    """Expand each token back to its voxel block and classify every voxel: ``[K, D, H, W]``."""
    expected = cfg.stage_grid(0)
    if tuple(s.grid) != tuple(expected):
        raise ContractError(f"patch expanding needs grid {tuple(expected)}, got {tuple(s.grid)}")
    d, h, w = s.grid
    pd, ph, pw = cfg.patch
    ch = expand.weight.shape[1] // (pd * ph * pw)
    x = reshape(expand(s.tokens), (d, h, w, pd, ph, pw, ch))
    x = permute(x, (0, 3, 1, 4, 2, 5, 6))
    dims = (d * pd, h * ph, w * pw)
    logits = head(reshape(x, (int(np.prod(dims)), ch)))
    return reshape(permute(logits, (1, 0)), (head.weight.shape[1], *dims))


def run_stage(x: StageTensor, params: StageParams, cfg: ModelConfig, stage: int) -> StageTensor:
    unit = cfg.stage_unit(stage)
    t = dpe_forward(x.tokens, x.grid, params.dpe)
    for pair in params.pairs:
        t = lsm_forward(t, x.grid, unit, pair.lsm)
        t = gsm_forward(t, x.grid, unit, pair.gsm)
    return StageTensor(t, x.grid)


def forward(model: Model, volume: Tensor) -> Tensor:
    """Class logits ``[K, D, H, W]`` for one ``[in_ch, D, H, W]`` volume."""
    cfg = model.config
    if volume.ndim != 4 or tuple(volume.shape) != (cfg.in_channels, *cfg.input_dims):
        raise DimensionError(
            f"volume {volume.shape} does not match config {(cfg.in_channels, *cfg.input_dims)}")
    x = patch_embed(volume, cfg, model.embed)
    skips = []
    for s in range(NUM_STAGES):
        x = run_stage(x, model.encoder[s], cfg, s)
        if s < NUM_STAGES - 1:
            skips.append(x)
            x = downsample(x, model.down[s])
    for s in reversed(range(NUM_STAGES - 1)):
        x = upsample(x, model.up[s])
        x = skip_fuse(x, skips[s], model.fuse[s])
        x = run_stage(x, model.decoder[s], cfg, s)
    return patch_expand_head(x, cfg, model.expand, model.head)
