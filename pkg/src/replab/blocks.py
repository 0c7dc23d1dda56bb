"""Backbone block families: residual CNN blocks and pre-norm transformer blocks.

Same-stage blocks (stride 1, equal width) are the replaceable ones. Stage
transitions are modeled with an optional strided projection shortcut but are
always kept by the planner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    gelu,
    layer_norm,
    linear,
    msa,
    relu,
)


@dataclass
class BNState:
    gamma: Parameter
    beta: Parameter
    mean: Tensor
    var: Tensor

    def __call__(self, x, mode: str, momentum: float = 0.1, eps: float = 1e-5):
        return batch_norm(x, self.gamma, self.beta, self.mean, self.var,
                          training=(mode == "train"), momentum=momentum, eps=eps)


@dataclass
class LNState:
    gamma: Parameter
    beta: Parameter

    def __call__(self, x, eps: float = 1e-5):
        return layer_norm(x, self.gamma, self.beta, eps=eps)


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform fan-in init with ReLU gain; std = sqrt(2/fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_bn(c: int, prefix: str) -> BNState:
    return BNState(
        gamma=Parameter(np.ones(c), f"{prefix}.gamma", decay_exempt=True),
        beta=Parameter(np.zeros(c), f"{prefix}.beta", decay_exempt=True),
        mean=Tensor(np.zeros(c)),
        var=Tensor(np.ones(c)),
    )


def init_ln(d: int, prefix: str) -> LNState:
    return LNState(
        gamma=Parameter(np.ones(d), f"{prefix}.gamma", decay_exempt=True),
        beta=Parameter(np.zeros(d), f"{prefix}.beta", decay_exempt=True),
    )


# ---------------------------------------------------------------------------
# CNN blocks
# ---------------------------------------------------------------------------

@dataclass
class BasicBlockParams:
    """Two q x q convolutions with BN, residual add, ReLU.

    ``proj``/``proj_bn`` hold the strided 1x1 shortcut of a stage-transition
    block; same-stage blocks leave them None.
    """

    conv1: Parameter
    bn1: BNState
    conv2: Parameter
    bn2: BNState
    stride: int = 1
    proj: Parameter | None = None
    proj_bn: BNState | None = None
    kind: str = "basic"

    @property
    def width(self) -> int:
        return self.conv2.shape[0]

    @property
    def q(self) -> int:
        return self.conv1.shape[2]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        q = self.q
        z = relu(self.bn1(conv2d(x, self.conv1, stride=self.stride, pad=q // 2), mode))
        u = self.bn2(conv2d(z, self.conv2, stride=1, pad=q // 2), mode)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_bn(conv2d(x, self.proj, stride=self.stride, pad=0), mode)
        return relu(shortcut + u)

    def named_params(self):
        yield self.conv1.pid, self.conv1
        yield self.bn1.gamma.pid, self.bn1.gamma
        yield self.bn1.beta.pid, self.bn1.beta
        yield self.conv2.pid, self.conv2
        yield self.bn2.gamma.pid, self.bn2.gamma
        yield self.bn2.beta.pid, self.bn2.beta
        if self.proj is not None:
            yield self.proj.pid, self.proj
            yield self.proj_bn.gamma.pid, self.proj_bn.gamma
            yield self.proj_bn.beta.pid, self.proj_bn.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.bn1.mean", self.bn1.mean
        yield f"{prefix}.bn1.var", self.bn1.var
        yield f"{prefix}.bn2.mean", self.bn2.mean
        yield f"{prefix}.bn2.var", self.bn2.var
        if self.proj is not None:
            yield f"{prefix}.proj_bn.mean", self.proj_bn.mean
            yield f"{prefix}.proj_bn.var", self.proj_bn.var


@dataclass
class BottleneckParams:
    """1x1 reduce, q x q spatial, 1x1 expand, each followed by BN."""

    conv_red: Parameter
    bn1: BNState
    conv_mid: Parameter
    bn2: BNState
    conv_exp: Parameter
    bn3: BNState
    stride: int = 1
    proj: Parameter | None = None
    proj_bn: BNState | None = None
    kind: str = "bottleneck"

    @property
    def width(self) -> int:
        return self.conv_exp.shape[0]

    @property
    def mid(self) -> int:
        return self.conv_mid.shape[0]

    @property
    def q(self) -> int:
        return self.conv_mid.shape[2]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        q = self.q
        z1 = relu(self.bn1(conv2d(x, self.conv_red, stride=1, pad=0), mode))
        z2 = relu(self.bn2(conv2d(z1, self.conv_mid, stride=self.stride, pad=q // 2), mode))
        u = self.bn3(conv2d(z2, self.conv_exp, stride=1, pad=0), mode)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_bn(conv2d(x, self.proj, stride=self.stride, pad=0), mode)
        return relu(shortcut + u)

    def named_params(self):
        for w, bn in ((self.conv_red, self.bn1), (self.conv_mid, self.bn2), (self.conv_exp, self.bn3)):
            yield w.pid, w
            yield bn.gamma.pid, bn.gamma
            yield bn.beta.pid, bn.beta
        if self.proj is not None:
            yield self.proj.pid, self.proj
            yield self.proj_bn.gamma.pid, self.proj_bn.gamma
            yield self.proj_bn.beta.pid, self.proj_bn.beta

    def named_buffers(self, prefix: str):
        for tag, bn in (("bn1", self.bn1), ("bn2", self.bn2), ("bn3", self.bn3)):
            yield f"{prefix}.{tag}.mean", bn.mean
            yield f"{prefix}.{tag}.var", bn.var
        if self.proj is not None:
            yield f"{prefix}.proj_bn.mean", self.proj_bn.mean
            yield f"{prefix}.proj_bn.var", self.proj_bn.var


# ---------------------------------------------------------------------------
# ViT block
# ---------------------------------------------------------------------------

@dataclass
class ViTBlockParams:
    """Pre-norm transformer block: X + MSA(LN1 X), then + MLP(LN2 ·)."""

    ln1: LNState
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln2: LNState
    mlp1: Parameter
    b_mlp1: Parameter
    mlp2: Parameter
    b_mlp2: Parameter
    heads: int
    kind: str = "vit"

    @property
    def dim(self) -> int:
        return self.wo.shape[0]

    @property
    def dff(self) -> int:
        return self.mlp1.shape[0]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        u = x + msa(self.ln1(x), self.wq, self.wk, self.wv, self.wo,
                    self.bq, self.bk, self.bv, self.bo, self.heads)
        h = gelu(linear(self.ln2(u), self.mlp1, self.b_mlp1))
        return u + linear(h, self.mlp2, self.b_mlp2)

    def named_params(self):
        yield self.ln1.gamma.pid, self.ln1.gamma
        yield self.ln1.beta.pid, self.ln1.beta
        for p in (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo):
            yield p.pid, p
        yield self.ln2.gamma.pid, self.ln2.gamma
        yield self.ln2.beta.pid, self.ln2.beta
        for p in (self.mlp1, self.b_mlp1, self.mlp2, self.b_mlp2):
            yield p.pid, p

    def named_buffers(self, prefix: str):
        return iter(())


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_basic_block(c_out: int, q: int = 3, c_in: int | None = None, stride: int = 1,
                     prefix: str = "block", seed=0) -> BasicBlockParams:
    if q % 2 != 1:
        raise ValueError(f"basic block kernel size must be odd, got {q}")
    rng = _as_rng(seed)
    c_in = c_out if c_in is None else c_in
    conv1 = Parameter(kaiming_uniform(rng, (c_out, c_in, q, q), c_in * q * q), f"{prefix}.conv1")
    conv2 = Parameter(kaiming_uniform(rng, (c_out, c_out, q, q), c_out * q * q), f"{prefix}.conv2")
    proj = proj_bn = None
    if stride != 1 or c_in != c_out:
        proj = Parameter(kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in), f"{prefix}.proj")
        proj_bn = init_bn(c_out, f"{prefix}.proj_bn")
    return BasicBlockParams(conv1, init_bn(c_out, f"{prefix}.bn1"),
                            conv2, init_bn(c_out, f"{prefix}.bn2"),
                            stride=stride, proj=proj, proj_bn=proj_bn)


def init_bottleneck_block(c_out: int, b_mid: int, q: int = 3, c_in: int | None = None,
                          stride: int = 1, prefix: str = "block", seed=0) -> BottleneckParams:
    if q % 2 != 1:
        raise ValueError(f"bottleneck kernel size must be odd, got {q}")
    rng = _as_rng(seed)
    c_in = c_out if c_in is None else c_in
    conv_red = Parameter(kaiming_uniform(rng, (b_mid, c_in, 1, 1), c_in), f"{prefix}.conv_red")
    conv_mid = Parameter(kaiming_uniform(rng, (b_mid, b_mid, q, q), b_mid * q * q), f"{prefix}.conv_mid")
    conv_exp = Parameter(kaiming_uniform(rng, (c_out, b_mid, 1, 1), b_mid), f"{prefix}.conv_exp")
    proj = proj_bn = None
    if stride != 1 or c_in != c_out:
        proj = Parameter(kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in), f"{prefix}.proj")
        proj_bn = init_bn(c_out, f"{prefix}.proj_bn")
    return BottleneckParams(conv_red, init_bn(b_mid, f"{prefix}.bn1"),
                            conv_mid, init_bn(b_mid, f"{prefix}.bn2"),
                            conv_exp, init_bn(c_out, f"{prefix}.bn3"),
                            stride=stride, proj=proj, proj_bn=proj_bn)


def init_vit_block(d: int, heads: int, mlp_ratio: int = 4, prefix: str = "block",
                   seed=0) -> ViTBlockParams:
    if d % heads != 0:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    rng = _as_rng(seed)
    dff = d * mlp_ratio

    def lin(shape, fan_in, tag):
        w = Parameter(kaiming_uniform(rng, shape, fan_in), f"{prefix}.{tag}")
        b = Parameter(np.zeros(shape[0]), f"{prefix}.b_{tag}")
        return w, b

    wq, bq = lin((d, d), d, "wq")
    wk, bk = lin((d, d), d, "wk")
    wv, bv = lin((d, d), d, "wv")
    wo, bo = lin((d, d), d, "wo")
    mlp1, b_mlp1 = lin((dff, d), d, "mlp1")
    mlp2, b_mlp2 = lin((d, dff), dff, "mlp2")
    return ViTBlockParams(init_ln(d, f"{prefix}.ln1"), wq, bq, wk, bk, wv, bv, wo, bo,
                          init_ln(d, f"{prefix}.ln2"), mlp1, b_mlp1, mlp2, b_mlp2, heads=heads)


def init_block(kind: str, seed=0, prefix: str = "block", **dims):
    """Dispatcher over the three block families; deterministic per seed."""
    if kind == "basic":
        return init_basic_block(prefix=prefix, seed=seed, **dims)
    if kind == "bottleneck":
        return init_bottleneck_block(prefix=prefix, seed=seed, **dims)
    if kind == "vit":
        return init_vit_block(prefix=prefix, seed=seed, **dims)
    raise ValueError(f"unknown block kind {kind!r}")


def basic_block_forward(p: BasicBlockParams, x: Tensor, mode: str) -> Tensor:
    return p.forward(x, mode)


def bottleneck_forward(p: BottleneckParams, x: Tensor, mode: str) -> Tensor:
    return p.forward(x, mode)


def vit_block_forward(p: ViTBlockParams, x: Tensor) -> Tensor:
    return p.forward(x)
