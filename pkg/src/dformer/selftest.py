"""Quick oracle and invariant checks runnable from the command line.

Each check compares an engine path against an independent numpy computation
and returns ``(passed, detail)``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .analyzer import count_params
from .attention import (AttentionParams, GridDims, UnitDims, attention_complexity, gs_msa,
                        ls_msa, partition_global, partition_local)
from .blocks import DpeParams, dpe_forward, lsm_forward
from .config import ModelConfig
from .losses import class_softmax, combined_loss, dice_score, one_hot
from .model import build_model, forward
from .tensor import (FlopCounter, Tensor, backward, depthwise_conv3d, finite_diff_oracle,
                     matmul, no_grad, relative_error, softmax_lastdim)

CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


def random_attention(rng, c: int, heads: int) -> AttentionParams:
    ws = []
    for _ in range(4):
        ws += [Tensor(rng.uniform(-0.5, 0.5, (c, c))), Tensor(rng.uniform(-0.1, 0.1, c))]
    return AttentionParams(heads, *ws)


def dense_attention(x: np.ndarray, p: AttentionParams, allowed: np.ndarray) -> np.ndarray:
    """Row-by-row multi-head attention where ``allowed[i, j]`` gates key j for query i."""
    n, c = x.shape
    hd = c // p.heads
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data + p.bk.data
    v = x @ p.wv.data + p.bv.data
    out = np.zeros((n, c))
    for h in range(p.heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            keys = np.flatnonzero(allowed[i])
            s = np.array([q[i, sl] @ k[j, sl] for j in keys]) / np.sqrt(hd)
            wgt = np.exp(s - s.max())
            wgt /= wgt.sum()
            out[i, sl] = wgt @ v[keys, sl]
    return out @ p.wo.data + p.bo.data


def same_unit_mask(part) -> np.ndarray:
    unit = part.forward_index[:, 0]
    return unit[:, None] == unit[None, :]


@check("matmul equals triple loop")
def _matmul():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    err = float(np.abs(matmul(Tensor(a), Tensor(b)).data - ref).max())
    return err < 1e-12, f"max abs diff {err:.2e}"


@check("softmax rows sum to one")
def _softmax():
    x = np.random.default_rng(1).standard_normal((5, 7)) * 50
    y = softmax_lastdim(Tensor(x)).data
    err = float(np.abs(y.sum(axis=-1) - 1).max())
    return err < 1e-12, f"max row-sum error {err:.2e}"


@check("depthwise conv equals naive loops")
def _conv():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 3, 3, 3))
    ref = np.zeros_like(x)
    for c in range(2):
        for i in range(4):
            for j in range(4):
                for m in range(4):
                    for a in range(3):
                        for b in range(3):
                            for e in range(3):
                                ii, jj, mm = i + a - 1, j + b - 1, m + e - 1
                                if 0 <= ii < 4 and 0 <= jj < 4 and 0 <= mm < 4:
                                    ref[c, i, j, m] += k[c, a, b, e] * x[c, ii, jj, mm]
    err = float(np.abs(depthwise_conv3d(Tensor(x), Tensor(k)).data - ref).max())
    return err < 1e-12, f"max abs diff {err:.2e}"


@check("LS-MSA equals block-diagonal masked attention")
def _local():
    rng = np.random.default_rng(3)
    grid, unit = GridDims(4, 4, 2), UnitDims(2, 2, 2)
    p = random_attention(rng, 4, 2)
    x = rng.standard_normal((grid.size, 4))
    ref = dense_attention(x, p, same_unit_mask(partition_local(grid, unit)))
    err = float(np.abs(ls_msa(Tensor(x), grid, unit, p).data - ref).max())
    return err < 1e-10, f"max abs diff {err:.2e}"


@check("GS-MSA equals dilated masked attention")
def _global():
    rng = np.random.default_rng(4)
    grid, unit = GridDims(4, 4, 4), UnitDims(2, 2, 2)
    p = random_attention(rng, 4, 2)
    x = rng.standard_normal((grid.size, 4))
    ref = dense_attention(x, p, same_unit_mask(partition_global(grid, unit)))
    err = float(np.abs(gs_msa(Tensor(x), grid, unit, p).data - ref).max())
    return err < 1e-10, f"max abs diff {err:.2e}"


@check("attention cost formula equals instrumented count")
def _complexity():
    rng = np.random.default_rng(5)
    grid, unit = GridDims(4, 4, 4), UnitDims(2, 2, 2)
    p = random_attention(rng, 2, 1)
    with no_grad(), FlopCounter() as fc:
        ls_msa(Tensor(rng.standard_normal((64, 2))), grid, unit, p)
    expected = attention_complexity(grid, 2, unit)
    return fc.multiplies == expected == 3072, f"measured {fc.multiplies}, analytic {expected}"


@check("zero-weight LSM and DPE are identities")
def _residual():
    rng = np.random.default_rng(6)
    model = build_model(ModelConfig(input_dims=(16, 32, 32), channels=4, heads=(1, 1, 1, 1),
                                    units=((2, 2, 2),) * 3 + ((1, 1, 1),), num_classes=2), 0)
    lsm = model.encoder[0].pairs[0].lsm
    for t in (lsm.attn.wo, lsm.attn.bo, lsm.mlp.fc2.weight, lsm.mlp.fc2.bias):
        t.data = np.zeros(t.shape)
    grid, unit = GridDims(8, 8, 8), UnitDims(2, 2, 2)
    x = rng.standard_normal((grid.size, 4))
    a = lsm_forward(Tensor(x), grid, unit, lsm).data
    b = dpe_forward(Tensor(x), grid, DpeParams(Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)))).data
    return bool(np.array_equal(a, x) and np.array_equal(b, x)), "bitwise equality"


@check("LSM gradient matches finite differences")
def _grad():
    rng = np.random.default_rng(7)
    grid, unit = GridDims(2, 2, 2), UnitDims(2, 1, 2)
    model = build_model(ModelConfig(input_dims=(16, 32, 32), channels=4, heads=(2, 2, 2, 2),
                                    units=((1, 1, 1),) * 4, num_classes=2), 1)
    lsm = model.encoder[0].pairs[0].lsm
    x = Tensor(rng.uniform(-1, 1, (grid.size, 4)), requires_grad=True)
    w = rng.standard_normal((grid.size, 4))

    def f(t):
        return (lsm_forward(t, grid, unit, lsm) * w).sum()

    grads = backward(f(x))
    err = relative_error(grads[x], finite_diff_oracle(f, x))
    return err < 1e-4, f"relative error {err:.2e}"


@check("perfect prediction loss is -1")
def _loss():
    labels = np.array([[[0, 1], [1, 0]]])
    loss = float(combined_loss([Tensor(one_hot(labels, 2))], [labels]).data)
    return abs(loss + 1) < 1e-5, f"loss {loss:.9f}"


@check("Dice identity, disjoint and subset cases")
def _dice():
    t = np.zeros(16, dtype=int)
    t[:8] = 1
    p = np.zeros(16, dtype=int)
    p[:4] = 1
    q = np.zeros(16, dtype=int)
    q[8:] = 1
    vals = (dice_score(t, t, 1), dice_score(q, t, 1), dice_score(p, t, 1))
    ok = vals[0] == 1.0 and vals[1] == 0.0 and abs(vals[2] - 2 / 3) < 1e-15
    return ok, f"{vals[0]:.3f} {vals[1]:.3f} {vals[2]:.6f}"


@check("parameter census equals built model")
def _census():
    cfg = ModelConfig(input_dims=(16, 32, 32), channels=8, heads=(2, 2, 2, 2), depths=(1, 1, 1, 1),
                      units=((2, 2, 2),) * 3 + ((1, 1, 1),), num_classes=2)
    built = build_model(cfg, 0).num_parameters()
    return built == count_params(cfg), f"built {built}, analytic {count_params(cfg)}"


@check("forward output shape and softmax normalisation")
def _forward():
    cfg = ModelConfig(input_dims=(16, 32, 32), channels=4, heads=(1, 1, 1, 1),
                      units=((2, 2, 2),) * 3 + ((1, 1, 1),), num_classes=3)
    model = build_model(cfg, 0)
    with no_grad():
        probs = class_softmax(forward(model, Tensor(np.random.default_rng(8).random((1, 16, 32, 32)))))
    ok = probs.shape == (3, 16, 32, 32) and float(np.abs(probs.data.sum(0) - 1).max()) < 1e-9
    return ok, f"shape {probs.shape}"


def run_all(echo: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail}; {time.perf_counter() - t0:.2f}s)")
    return all_ok
