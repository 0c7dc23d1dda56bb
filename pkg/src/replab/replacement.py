"""Computing layers: lightweight substitutes synthesized from neighbor weights.

A computing layer sits at a removed block position and builds its operator on
every forward pass from the adjacent retained blocks' parameters (the anchors,
read through stop-gradient) mixed by its own small set of learnable
coefficients. Anchors therefore receive gradient only through their own
blocks' forward paths, never through the synthesis.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .blocks import BNState, init_bn
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    conv2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    stop_gradient,
    swap_last,
    sqrt,
    tsum,
)

SYNTH_EPS = 1e-5


@dataclass
class SynthCoeffs:
    """Learnable mixing coefficients for the two anchor sides.

    Extent 1 for the scalar variant, C_out for channel-wise, H for head-wise.
    ``beta`` is None in the tied single-coefficient variant, where the
    effective beta is 1 - alpha. A side frozen by a neighbor-ablation flag is
    a plain zero Tensor instead of a Parameter.
    """

    alpha: Tensor
    beta: Tensor | None
    tied: bool = False

    def effective(self) -> tuple[Tensor, Tensor]:
        if self.tied:
            return self.alpha, 1.0 - self.alpha
        return self.alpha, self.beta

    @property
    def extent(self) -> int:
        return self.alpha.size

    def named_params(self):
        if isinstance(self.alpha, Parameter):
            yield self.alpha.pid, self.alpha
        if self.beta is not None and isinstance(self.beta, Parameter):
            yield self.beta.pid, self.beta


def init_coeffs(extent: int, prefix: str, neighbors: str = "both",
                coeff_mode: str = "two") -> SynthCoeffs:
    if coeff_mode == "one":
        if neighbors != "both":
            raise ValueError("tied single-coefficient mode requires both neighbors")
        alpha = Parameter(np.full(extent, 0.5), f"{prefix}.alpha", decay_exempt=True)
        return SynthCoeffs(alpha, None, tied=True)
    if neighbors == "both":
        alpha = Parameter(np.full(extent, 0.5), f"{prefix}.alpha", decay_exempt=True)
        beta = Parameter(np.full(extent, 0.5), f"{prefix}.beta", decay_exempt=True)
    elif neighbors == "prev_only":
        alpha = Parameter(np.full(extent, 0.5), f"{prefix}.alpha", decay_exempt=True)
        beta = Tensor(np.zeros(extent))
    elif neighbors == "next_only":
        alpha = Tensor(np.zeros(extent))
        beta = Parameter(np.full(extent, 0.5), f"{prefix}.beta", decay_exempt=True)
    else:
        raise ValueError(f"unknown neighbor mode {neighbors!r}")
    return SynthCoeffs(alpha, beta)


# ---------------------------------------------------------------------------
# weight normalization and synthesis
# ---------------------------------------------------------------------------

def normalize_conv_kernel(w: Tensor, eps: float = SYNTH_EPS) -> Tensor:
    """Divide each output-channel slice by sqrt(sum of squares + eps)."""
    if eps <= 0:
        raise ValueError("normalization eps must be positive")
    norm = sqrt(tsum(w * w, axis=(1, 2, 3), keepdims=True) + eps)
    return w / norm


def normalize_linear_rows(w: Tensor, eps: float = SYNTH_EPS) -> Tensor:
    """Divide each row by sqrt(sum of squares + eps)."""
    if eps <= 0:
        raise ValueError("normalization eps must be positive")
    norm = sqrt(tsum(w * w, axis=-1, keepdims=True) + eps)
    return w / norm


def synth_basic_kernel(w_prev: Tensor, w_next: Tensor, coeffs: SynthCoeffs,
                       eps: float = SYNTH_EPS) -> Tensor:
    """Channel-wise mix of the normalized neighbor kernels.

    Expects anchors already wrapped in stop_gradient; the result is
    differentiable in the coefficients only.
    """
    if w_prev.shape != w_next.shape:
        raise ShapeError(
            f"kernel synthesis: anchor shapes differ ({w_prev.shape} vs {w_next.shape})"
        )
    alpha, beta = coeffs.effective()
    a = reshape(alpha, (-1, 1, 1, 1))
    b = reshape(beta, (-1, 1, 1, 1))
    return a * normalize_conv_kernel(w_prev, eps) + b * normalize_conv_kernel(w_next, eps)


# the bottleneck middle kernel follows the identical contract at width B
synth_bottleneck_mid = synth_basic_kernel


def synth_vit_proj(wo_prev: Tensor, wo_next: Tensor, bo_prev: Tensor, bo_next: Tensor,
                   coeffs: SynthCoeffs, mode: str, heads: int = 1,
                   eps: float = SYNTH_EPS) -> tuple[Tensor, Tensor]:
    """Synthesize the attention output projection and its bias.

    scalar: raw anchors mixed by scalar alpha/beta, bias mixed the same way.
    headwise: row-normalized anchors mixed per head over column groups, bias
    fixed at the plain average of the two neighbor biases.
    """
    if wo_prev.shape != wo_next.shape:
        raise ShapeError(
            f"projection synthesis: anchor shapes differ ({wo_prev.shape} vs {wo_next.shape})"
        )
    alpha, beta = coeffs.effective()
    if mode == "scalar":
        w = alpha * wo_prev + beta * wo_next
        b = alpha * bo_prev + beta * bo_next
        return w, b
    if mode == "headwise":
        d = wo_prev.shape[1]
        if d % heads != 0:
            raise ShapeError(f"headwise synthesis: dim {d} not divisible by {heads} heads")
        dh = d // heads
        # expand per-head coefficients onto their column groups
        ones = Tensor(np.ones((heads, dh), dtype=wo_prev.dtype))
        col_a = reshape(reshape(alpha, (heads, 1)) * ones, (d,))
        col_b = reshape(reshape(beta, (heads, 1)) * ones, (d,))
        w = normalize_linear_rows(wo_prev, eps) * col_a + normalize_linear_rows(wo_next, eps) * col_b
        b = 0.5 * (bo_prev + bo_next)
        return w, b
    raise ValueError(f"unknown projection synthesis mode {mode!r}")


def synth_vit_mlp(mlp1_prev: Tensor, b1_prev: Tensor, mlp2_prev: Tensor, b2_prev: Tensor,
                  mlp1_next: Tensor, b1_next: Tensor, mlp2_next: Tensor, b2_next: Tensor,
                  eps: float = SYNTH_EPS):
    """Fixed half-averages of row-normalized MLP weights and raw biases."""
    if mlp1_prev.shape != mlp1_next.shape or mlp2_prev.shape != mlp2_next.shape:
        raise ShapeError("mlp synthesis: neighbor blocks disagree on (d, dff)")
    w1 = 0.5 * (normalize_linear_rows(mlp1_prev, eps) + normalize_linear_rows(mlp1_next, eps))
    w2 = 0.5 * (normalize_linear_rows(mlp2_prev, eps) + normalize_linear_rows(mlp2_next, eps))
    b1 = 0.5 * (b1_prev + b1_next)
    b2 = 0.5 * (b2_prev + b2_next)
    return w1, b1, w2, b2


# ---------------------------------------------------------------------------
# computing layers
# ---------------------------------------------------------------------------

def _sg(anchors: dict, key: str) -> Tensor:
    return stop_gradient(anchors[key])


@dataclass
class ComputingBasic:
    """Replacement for a BasicBlock: ReLU(x + BN(conv(x, synthesized kernel)))."""

    coeffs: SynthCoeffs
    bn: BNState
    anchors: dict[str, Tensor]  # prev_conv2, next_conv1
    eps: float = SYNTH_EPS
    kind: str = "computing_basic"

    @property
    def width(self) -> int:
        return self.anchors["prev_conv2"].shape[0]

    @property
    def q(self) -> int:
        return self.anchors["prev_conv2"].shape[2]

    def synthesized(self) -> Tensor:
        return synth_basic_kernel(_sg(self.anchors, "prev_conv2"),
                                  _sg(self.anchors, "next_conv1"),
                                  self.coeffs, self.eps)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        y = self.bn(conv2d(x, self.synthesized(), stride=1, pad=self.q // 2), mode)
        return relu(x + y)

    def named_params(self):
        yield from self.coeffs.named_params()
        yield self.bn.gamma.pid, self.bn.gamma
        yield self.bn.beta.pid, self.bn.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.bn.mean", self.bn.mean
        yield f"{prefix}.bn.var", self.bn.var


@dataclass
class ComputingBottleneck:
    """Replacement for a Bottleneck, reusing the neighbors' 1x1 projections."""

    coeffs: SynthCoeffs  # extent = middle width B
    bn: BNState
    anchors: dict[str, Tensor]  # prev_red, prev_mid, next_mid, next_exp
    eps: float = SYNTH_EPS
    kind: str = "computing_bottleneck"

    @property
    def width(self) -> int:
        return self.anchors["next_exp"].shape[0]

    @property
    def mid(self) -> int:
        return self.anchors["prev_mid"].shape[0]

    @property
    def q(self) -> int:
        return self.anchors["prev_mid"].shape[2]

    def synthesized_mid(self) -> Tensor:
        return synth_bottleneck_mid(_sg(self.anchors, "prev_mid"),
                                    _sg(self.anchors, "next_mid"),
                                    self.coeffs, self.eps)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if self.anchors["prev_red"].shape[1] != x.shape[1]:
            raise ShapeError(
                f"computing bottleneck: input width {x.shape[1]} incompatible with "
                f"reduction anchor {self.anchors['prev_red'].shape}"
            )
        z1 = relu(conv2d(x, _sg(self.anchors, "prev_red"), stride=1, pad=0))
        z2 = relu(conv2d(z1, self.synthesized_mid(), stride=1, pad=self.q // 2))
        y = self.bn(conv2d(z2, _sg(self.anchors, "next_exp"), stride=1, pad=0), mode)
        return relu(x + y)

    def named_params(self):
        yield from self.coeffs.named_params()
        yield self.bn.gamma.pid, self.bn.gamma
        yield self.bn.beta.pid, self.bn.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.bn.mean", self.bn.mean
        yield f"{prefix}.bn.var", self.bn.var


@dataclass
class ComputingViT:
    """Replacement for a ViT block: residual projection and/or MLP branch.

    Branch order when both flags are set: attention first, then MLP, mirroring
    the pre-norm block. With both flags off the layer is the identity.
    """

    attn_coeffs: SynthCoeffs | None
    use_attn: bool
    use_mlp: bool
    synth_mode: str  # scalar | headwise
    scale_mode: str  # none | inv_sqrt_d
    heads: int
    anchors: dict[str, Tensor]
    eps: float = SYNTH_EPS
    kind: str = "computing_vit"

    @property
    def dim(self) -> int:
        return self.anchors["wo_prev"].shape[0]

    def attn_branch(self, x: Tensor) -> Tensor:
        w, b = synth_vit_proj(_sg(self.anchors, "wo_prev"), _sg(self.anchors, "wo_next"),
                              _sg(self.anchors, "bo_prev"), _sg(self.anchors, "bo_next"),
                              self.attn_coeffs, self.synth_mode, self.heads, self.eps)
        if self.synth_mode == "headwise":
            xt = layer_norm(x, _sg(self.anchors, "ln1_gamma"), _sg(self.anchors, "ln1_beta"))
        else:
            xt = x
        delta = matmul(xt, swap_last(w))
        if self.scale_mode == "inv_sqrt_d":
            delta = delta * (1.0 / math.sqrt(self.dim))
        return x + (delta + b)

    def mlp_branch(self, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = synth_vit_mlp(
            _sg(self.anchors, "mlp1_prev"), _sg(self.anchors, "b_mlp1_prev"),
            _sg(self.anchors, "mlp2_prev"), _sg(self.anchors, "b_mlp2_prev"),
            _sg(self.anchors, "mlp1_next"), _sg(self.anchors, "b_mlp1_next"),
            _sg(self.anchors, "mlp2_next"), _sg(self.anchors, "b_mlp2_next"),
            self.eps)
        xt = layer_norm(x, _sg(self.anchors, "ln2_gamma"), _sg(self.anchors, "ln2_beta"))
        h = gelu(linear(xt, w1, b1))
        return x + linear(h, w2, b2)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        y = x
        if self.use_attn:
            y = self.attn_branch(y)
        if self.use_mlp:
            y = self.mlp_branch(y)
        return y

    def named_params(self):
        if self.attn_coeffs is not None:
            yield from self.attn_coeffs.named_params()

    def named_buffers(self, prefix: str):
        return iter(())


COMPUTING_KINDS = ("computing_basic", "computing_bottleneck", "computing_vit")


def make_computing_basic(prev_block, next_block, prefix: str, neighbors: str = "both",
                         coeff_mode: str = "two") -> ComputingBasic:
    if prev_block.conv2.shape != next_block.conv1.shape:
        raise ShapeError(
            f"computing layer at {prefix}: anchor kernels disagree "
            f"({prev_block.conv2.shape} vs {next_block.conv1.shape})"
        )
    c = prev_block.conv2.shape[0]
    return ComputingBasic(
        coeffs=init_coeffs(c, prefix, neighbors, coeff_mode),
        bn=init_bn(c, f"{prefix}.bn"),
        anchors={"prev_conv2": prev_block.conv2, "next_conv1": next_block.conv1},
    )


def make_computing_bottleneck(prev_block, next_block, prefix: str, neighbors: str = "both",
                              coeff_mode: str = "two") -> ComputingBottleneck:
    if prev_block.conv_mid.shape != next_block.conv_mid.shape:
        raise ShapeError(
            f"computing layer at {prefix}: middle anchor kernels disagree "
            f"({prev_block.conv_mid.shape} vs {next_block.conv_mid.shape})"
        )
    site_width = next_block.conv_exp.shape[0]
    if prev_block.conv_red.shape[1] != site_width:
        # happens only when the left neighbor is a stage-transition block
        # (K=2, site at index 2): its reduce conv reads the previous stage's width
        raise ShapeError(
            f"computing layer at {prefix}: reduction anchor reads "
            f"{prev_block.conv_red.shape[1]} channels but the site is "
            f"{site_width} wide"
        )
    b = prev_block.conv_mid.shape[0]
    c = next_block.conv_exp.shape[0]
    return ComputingBottleneck(
        coeffs=init_coeffs(b, prefix, neighbors, coeff_mode),
        bn=init_bn(c, f"{prefix}.bn"),
        anchors={
            "prev_red": prev_block.conv_red,
            "prev_mid": prev_block.conv_mid,
            "next_mid": next_block.conv_mid,
            "next_exp": next_block.conv_exp,
        },
    )


def make_computing_vit(prev_block, next_block, prefix: str, synth_mode: str = "headwise",
                       use_attn: bool = True, use_mlp: bool = True,
                       neighbors: str = "both", coeff_mode: str = "two") -> ComputingViT:
    if prev_block.wo.shape != next_block.wo.shape:
        raise ShapeError(
            f"computing layer at {prefix}: projection anchors disagree "
            f"({prev_block.wo.shape} vs {next_block.wo.shape})"
        )
    heads = prev_block.heads
    anchors = {
        "wo_prev": prev_block.wo, "bo_prev": prev_block.bo,
        "wo_next": next_block.wo, "bo_next": next_block.bo,
        "ln1_gamma": prev_block.ln1.gamma, "ln1_beta": prev_block.ln1.beta,
        "ln2_gamma": prev_block.ln2.gamma, "ln2_beta": prev_block.ln2.beta,
        "mlp1_prev": prev_block.mlp1, "b_mlp1_prev": prev_block.b_mlp1,
        "mlp2_prev": prev_block.mlp2, "b_mlp2_prev": prev_block.b_mlp2,
        "mlp1_next": next_block.mlp1, "b_mlp1_next": next_block.b_mlp1,
        "mlp2_next": next_block.mlp2, "b_mlp2_next": next_block.b_mlp2,
    }
    coeffs = None
    if use_attn:
        extent = heads if synth_mode == "headwise" else 1
        coeffs = init_coeffs(extent, prefix, neighbors, coeff_mode)
    return ComputingViT(
        attn_coeffs=coeffs,
        use_attn=use_attn,
        use_mlp=use_mlp,
        synth_mode=synth_mode,
        scale_mode="inv_sqrt_d" if synth_mode == "headwise" else "none",
        heads=heads,
        anchors=anchors,
    )


def freeze_layer_anchors(layer):
    """Copy of a computing layer whose anchors are constant snapshots."""
    frozen = {k: Tensor(v.data.copy()) for k, v in layer.anchors.items()}
    return dataclasses.replace(layer, anchors=frozen)


def computing_basic_forward(layer: ComputingBasic, x: Tensor, mode: str) -> Tensor:
    return layer.forward(x, mode)


def computing_bottleneck_forward(layer: ComputingBottleneck, x: Tensor, mode: str) -> Tensor:
    return layer.forward(x, mode)


def computing_vit_attn_forward(layer: ComputingViT, x: Tensor) -> Tensor:
    return layer.attn_branch(x)


def computing_vit_mlp_forward(layer: ComputingViT, x: Tensor) -> Tensor:
    return layer.mlp_branch(x)


def computing_vit_forward(layer: ComputingViT, x: Tensor) -> Tensor:
    return layer.forward(x)
