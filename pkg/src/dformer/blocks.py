"""Sub-layers of a D-Former block: scope modules, MLP and dynamic position encoding."""

from __future__ import annotations

from dataclasses import dataclass

from .attention import AttentionParams, GridDims, UnitDims, dilation, gs_msa, ls_msa
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor, add, depthwise_conv3d, gelu, layer_norm, linear, permute, reshape


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams
    activation: str = "gelu"

    @property
    def ratio(self) -> float:
        return self.fc1.weight.shape[1] / self.fc1.weight.shape[0]


@dataclass
class ScopeModuleParams:
    scope: str  # "local" or "global"
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    mlp: MlpParams
    eps: float = 1e-5


@dataclass
class DpeParams:
    kernel: Tensor  # [C, kd, kh, kw]
    bias: Tensor  # [C]


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    if p.activation != "gelu":
        raise ParameterError(f"unsupported activation {p.activation!r}")
    if x.shape[-1] != p.fc1.weight.shape[0] or p.fc1.weight.shape[1] != p.fc2.weight.shape[0]:
        raise DimensionError(
            f"MLP extents mismatch: x {x.shape}, fc1 {p.fc1.weight.shape}, fc2 {p.fc2.weight.shape}")
    return p.fc2(gelu(p.fc1(x)))


def _scope_forward(z: Tensor, grid, unit, p: ScopeModuleParams, attend) -> Tensor:
    z_hat = add(attend(layer_norm(z, p.norm1.gamma, p.norm1.beta, p.eps), grid, unit, p.attn), z)
    return add(mlp_forward(layer_norm(z_hat, p.norm2.gamma, p.norm2.beta, p.eps), p.mlp), z_hat)


def lsm_forward(z_prev: Tensor, grid: GridDims, unit: UnitDims, p: ScopeModuleParams) -> Tensor:
    """Pre-norm local scope module: attention residual, then MLP residual."""
    if p.scope != "local":
        raise ContractError(f"lsm_forward given {p.scope!r} scope parameters")
    return _scope_forward(z_prev, grid, unit, p, ls_msa)


def gsm_forward(z: Tensor, grid: GridDims, unit: UnitDims, p: ScopeModuleParams) -> Tensor:
    """Pre-norm global scope module; attention runs over dilated units."""
    if p.scope != "global":
        raise ContractError(f"gsm_forward given {p.scope!r} scope parameters")
    dilation(GridDims(*grid), UnitDims(*unit))
    return _scope_forward(z, grid, unit, p, gs_msa)


def tokens_to_volume(x: Tensor, grid: GridDims) -> Tensor:
    """``[N, C]`` token sequence to a ``[C, d, h, w]`` volume."""
    n, c = x.shape
    return reshape(permute(x, (1, 0)), (c, *grid))


def volume_to_tokens(v: Tensor) -> Tensor:
    c = v.shape[0]
    return permute(reshape(v, (c, v.size // c)), (1, 0))


def dpe_forward(x: Tensor, grid: GridDims, p: DpeParams) -> Tensor:
    """Residual depthwise convolution over the token grid."""
    grid = GridDims(*grid)
    if x.ndim != 2 or x.shape[0] != grid.size:
        raise DimensionError(f"tokens {x.shape} do not match grid {tuple(grid)}")
    c = x.shape[1]
    if p.kernel.shape[0] != c or p.bias.shape != (c,):
        raise DimensionError(f"DPE kernel {p.kernel.shape} does not match {c} channels")
    conv = depthwise_conv3d(tokens_to_volume(x, grid), p.kernel)
    conv = add(conv, reshape(p.bias, (c, 1, 1, 1)))
    return add(volume_to_tokens(conv), x)
