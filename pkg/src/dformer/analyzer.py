"""Shape-only parameter and multiply accounting, plus the attention scaling bench.

One FLOP here is one scalar multiply-accumulate inside a linear layer,
matrix product or convolution.  Activations, normalisation, softmax and
elementwise arithmetic are not counted.  Nothing in this module touches the
tensor engine except :func:`bench_attention`, which measures it.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import GridDims, UnitDims, attention_complexity
from .config import NUM_STAGES, ModelConfig, _triple


@dataclass
class ComplexityReport:
    input_dims: tuple[int, int, int]
    components: dict[str, tuple[int, int]] = field(default_factory=dict)  # name -> (params, flops)

    def add(self, name: str, params: int, flops: int) -> None:
        p, f = self.components.get(name, (0, 0))
        self.components[name] = (p + params, f + flops)

    @property
    def total_params(self) -> int:
        return sum(p for p, _ in self.components.values())

    @property
    def total_flops(self) -> int:
        return sum(f for _, f in self.components.values())

    def records(self) -> list[dict]:
        return [{"component": k, "params": p, "flops": f} for k, (p, f) in self.components.items()]

    def format_table(self) -> str:
        width = max(len(k) for k in self.components) if self.components else 9
        lines = [f"{'component':<{width}}  {'params':>14}  {'flops':>18}"]
        for k, (p, f) in self.components.items():
            lines.append(f"{k:<{width}}  {p:>14,}  {f:>18,}")
        lines.append(f"{'total':<{width}}  {self.total_params:>14,}  {self.total_flops:>18,}")
        lines.append(f"# {self.total_params / 1e6:.2f}M parameters, "
                     f"{self.total_flops / 1e9:.2f}G multiplies at input "
                     f"{'x'.join(map(str, self.input_dims))}")
        return "\n".join(lines)


def linear_cost(fan_in: int, fan_out: int, rows: int) -> tuple[int, int]:
    """(parameters, multiplies) of a biased linear map applied to ``rows`` rows."""
    return fan_in * fan_out + fan_out, rows * fan_in * fan_out


def _stage(report: ComplexityReport, name: str, cfg: ModelConfig, s: int, grid: GridDims) -> None:
    c, n, unit, r = cfg.stage_channels(s), grid.size, cfg.stage_unit(s), cfg.mlp_ratio
    kvol = int(np.prod(cfg.dpe_kernel))
    report.add(f"{name}.dpe", c * kvol + c, n * c * kvol)
    modules = 2 * cfg.depths[s]
    attn_params = 4 * (c * c + c)
    report.add(f"{name}.attn", modules * attn_params, modules * attention_complexity(grid, c, unit))
    mp1, mf1 = linear_cost(c, r * c, n)
    mp2, mf2 = linear_cost(r * c, c, n)
    report.add(f"{name}.mlp", modules * (mp1 + mp2), modules * (mf1 + mf2))
    report.add(f"{name}.norm", modules * 4 * c, 0)


def analyze(cfg: ModelConfig, input_dims=None) -> ComplexityReport:
    """Per-component parameters and multiplies of one forward pass."""
    cfg.validate(input_dims)
    dims = cfg.input_dims if input_dims is None else _triple(input_dims)
    report = ComplexityReport(dims)
    grids = [cfg.stage_grid(s, dims) for s in range(NUM_STAGES)]
    patch_vol = int(np.prod(cfg.patch))
    report.add("embed", *linear_cost(cfg.in_channels * patch_vol, cfg.channels, grids[0].size))
    for s in range(NUM_STAGES):
        _stage(report, f"enc{s + 1}", cfg, s, grids[s])
        if s < NUM_STAGES - 1:
            c = cfg.stage_channels(s)
            report.add(f"down{s + 1}", *linear_cost(8 * c, 2 * c, grids[s + 1].size))
    for s in reversed(range(NUM_STAGES - 1)):
        c = cfg.stage_channels(s)
        report.add(f"up{s + 1}", *linear_cost(2 * c, 8 * c, grids[s + 1].size))
        report.add(f"fuse{s + 1}", *linear_cost(2 * c, c, grids[s].size))
        _stage(report, f"dec{s + 1}", cfg, s, grids[s])
    ch = cfg.decoder_channels
    report.add("expand", *linear_cost(cfg.channels, patch_vol * ch, grids[0].size))
    report.add("head", *linear_cost(ch, cfg.num_classes, int(np.prod(dims))))
    return report


def count_params(cfg: ModelConfig) -> int:
    return analyze(cfg).total_params


def count_flops(cfg: ModelConfig, input_dims=None) -> int:
    return analyze(cfg, input_dims).total_flops


@dataclass
class BenchRow:
    grid: tuple[int, int, int]
    patches: int
    msa: int
    ls_msa: int
    measured: int
    seconds: float

    def as_dict(self) -> dict:
        return {"grid": "x".join(map(str, self.grid)), "patches": self.patches,
                "msa": self.msa, "ls_msa": self.ls_msa, "measured": self.measured,
                "seconds": self.seconds}


def bench_attention(grids, unit, channels: int, repeats: int = 5, heads: int = 1,
                    seed: int = 0) -> list[BenchRow]:
    """Analytic and measured cost of LS-MSA over a range of grid sizes.

    ``seconds`` is the median wall-clock of ``repeats`` gradient-free runs.
    """
    from .attention import AttentionParams, ls_msa
    from .tensor import FlopCounter, Tensor, no_grad

    rng = np.random.default_rng(seed)
    unit = UnitDims(*unit)

    def w(*shape):
        return Tensor(rng.standard_normal(shape) * 0.1)

    params = AttentionParams(heads, *(t for _ in range(4) for t in (w(channels, channels), w(channels))))
    rows = []
    for grid in grids:
        grid = GridDims(*grid)
        x = Tensor(rng.standard_normal((grid.size, channels)))
        with no_grad():
            with FlopCounter() as fc:
                ls_msa(x, grid, unit, params)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                ls_msa(x, grid, unit, params)
                times.append(time.perf_counter() - t0)
        rows.append(BenchRow(tuple(grid), grid.size, attention_complexity(grid, channels),
                             attention_complexity(grid, channels, unit), fc.multiplies,
                             statistics.median(times)))
    return rows
