"""Random parameter builders and shared small configurations."""

from dformer.attention import AttentionParams
from dformer.blocks import DpeParams, LinearParams, MlpParams, NormParams, ScopeModuleParams
from dformer.config import ModelConfig
from dformer.tensor import Tensor


def rand_tensor(rng, *shape, scale=1.0, grad=False):
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=grad)


def rand_attention(rng, c, heads, scale=0.5, grad=False):
    ws = []
    for _ in range(4):
        ws += [rand_tensor(rng, c, c, scale=scale, grad=grad), rand_tensor(rng, c, scale=0.1, grad=grad)]
    return AttentionParams(heads, *ws)


def rand_scope(rng, scope, c, heads, ratio=2, grad=False):
    def lin(i, o):
        return LinearParams(rand_tensor(rng, i, o, scale=0.5, grad=grad), rand_tensor(rng, o, scale=0.1, grad=grad))

    def norm():
        return NormParams(Tensor(1 + rng.uniform(-0.2, 0.2, c), requires_grad=grad),
                          rand_tensor(rng, c, scale=0.1, grad=grad))

    return ScopeModuleParams(scope, norm(), rand_attention(rng, c, heads, grad=grad), norm(),
                             MlpParams(lin(c, ratio * c), lin(ratio * c, c)))


def rand_dpe(rng, c, k=3, grad=False):
    return DpeParams(rand_tensor(rng, c, k, k, k, scale=0.5, grad=grad), rand_tensor(rng, c, scale=0.1, grad=grad))


# Small but complete configurations (every stage divisible, three downsamplings).
TINY = ModelConfig(input_dims=(8, 16, 16), patch=(1, 2, 2), channels=4, num_classes=2,
                   depths=(1, 1, 1, 1), heads=(1, 2, 2, 2), mlp_ratio=2,
                   units=((2, 2, 2), (2, 2, 2), (1, 1, 1), (1, 1, 1)), head_channels=2)

SMALL = ModelConfig(input_dims=(16, 32, 32), channels=8, num_classes=3, heads=(2, 2, 4, 4),
                    units=((4, 4, 4), (2, 2, 2), (2, 2, 2), (1, 1, 1)))
