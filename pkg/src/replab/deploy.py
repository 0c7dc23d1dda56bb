"""Deploy-time re-parameterization.

Exporting a trained network materializes every synthesized operator once,
folds eval-mode BN statistics (and the fixed projection scaling) into static
weights, and emits a flat op program that runs on plain numpy arrays: no
synthesis, no stop-gradient, no tape, no coefficient reads.

Residual topology is encoded with a small value stack: ``push`` saves the
current activation (optionally through a folded projection shortcut) and
``add`` pops and adds it back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .builder import Network
from .replacement import COMPUTING_KINDS
from .tensor import _im2col

_GELU_C = math.sqrt(2.0 / math.pi)


def fold_bn_conv(w, b, gamma, beta, mean, var, eps: float = 1e-5):
    """Fold eval-mode BN into the preceding conv: scale weights, shift bias."""
    w = np.asarray(w)
    if np.any(np.asarray(var) < 0):
        raise ValueError("bn folding: negative running variance")
    scale = gamma / np.sqrt(var + eps)
    if b is None:
        b = np.zeros(w.shape[0], dtype=w.dtype)
    w_deploy = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
    b_deploy = scale * (b - mean) + beta
    return w_deploy, b_deploy


def fold_linear(w, b, c_scale: float):
    """Fold a fixed inference-time scaling factor into a linear layer."""
    if c_scale <= 0:
        raise ValueError("fold_linear: scale factor must be positive")
    return np.asarray(w) * c_scale, np.asarray(b) * c_scale


@dataclass
class DeployOp:
    kind: str
    source: str  # provenance: the dynamic unit this op was folded from
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


class DeployModel:
    """Terminal static operator list; evaluation never touches the tape."""

    def __init__(self, ops: list[DeployOp], num_classes: int, flavor_meta: dict):
        self.ops = ops
        self.num_classes = num_classes
        self.flavor_meta = flavor_meta

    @property
    def provenance(self) -> list[str]:
        return [op.source for op in self.ops]

    def cast(self, dtype) -> "DeployModel":
        for op in self.ops:
            op.arrays = {k: v.astype(dtype) for k, v in op.arrays.items()}
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x)
        stack: list[np.ndarray] = []
        for op in self.ops:
            h = _run_op(op, h, stack)
        return h

    def __call__(self, x):
        return self.forward(x)


def _np_conv(x, w, b, stride, pad):
    bsz, cin, hh, ww = x.shape
    cout, _, q, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, q, stride)
    ho = (hh + 2 * pad - q) // stride + 1
    wo = (ww + 2 * pad - q) // stride + 1
    out = (w.reshape(cout, -1) @ cols).reshape(bsz, cout, ho, wo)
    return out + b.reshape(1, -1, 1, 1)


def _np_linear(x, w, b):
    return x @ np.swapaxes(w, -1, -2) + b


def _np_layer_norm(x, gamma, beta, eps):
    d = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * (1.0 / d)
    var = ((x - mu) ** 2).sum(axis=-1, keepdims=True) * (1.0 / d)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _np_msa(x, a, heads):
    bsz, t, d = x.shape
    dh = d // heads

    def split(z):
        return z.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(_np_linear(x, a["wq"], a["bq"]))
    k = split(_np_linear(x, a["wk"], a["bk"]))
    v = split(_np_linear(x, a["wv"], a["bv"]))
    probs = _np_softmax(q @ np.swapaxes(k, -1, -2) * (1.0 / math.sqrt(dh)))
    mixed = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    return _np_linear(mixed, a["wo"], a["bo"])


def _run_op(op: DeployOp, h: np.ndarray, stack: list[np.ndarray]) -> np.ndarray:
    kind = op.kind
    if kind == "push":
        stack.append(h)
        return h
    if kind == "push_conv":  # projection shortcut: push conv(h), keep h current
        stack.append(_np_conv(h, op.arrays["w"], op.arrays["b"],
                              op.meta["stride"], op.meta["pad"]))
        return h
    if kind == "add":
        return stack.pop() + h
    if kind == "conv":
        return _np_conv(h, op.arrays["w"], op.arrays["b"], op.meta["stride"], op.meta["pad"])
    if kind == "linear":
        return _np_linear(h, op.arrays["w"], op.arrays["b"])
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "gelu":
        return _np_gelu(h)
    if kind == "layer_norm":
        return _np_layer_norm(h, op.arrays["gamma"], op.arrays["beta"], op.meta["eps"])
    if kind == "msa":
        return _np_msa(h, op.arrays, op.meta["heads"])
    if kind == "patch_embed":
        bsz, c, hh, ww = h.shape
        ps = op.meta["patch"]
        hn, wn = hh // ps, ww // ps
        t = h.reshape(bsz, c, hn, ps, wn, ps).transpose(0, 2, 4, 1, 3, 5)
        return _np_linear(t.reshape(bsz, hn * wn, c * ps * ps), op.arrays["w"], op.arrays["b"])
    if kind == "avgpool":
        bsz, c = h.shape[0], h.shape[1]
        return h.sum(axis=(2, 3)) * (1.0 / (h.shape[2] * h.shape[3]))
    if kind == "tokenpool":
        return h.sum(axis=1) * (1.0 / h.shape[1])
    raise ValueError(f"unknown deploy op kind {op.kind!r}")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _fold(conv_param, bn, source, stride=1, pad=0) -> DeployOp:
    w, b = fold_bn_conv(conv_param.data, None, bn.gamma.data, bn.beta.data,
                        bn.mean.data, bn.var.data)
    return DeployOp("conv", source, {"w": w, "b": b}, {"stride": stride, "pad": pad})


def _emit_block(name: str, unit, ops: list[DeployOp]) -> None:
    kind = unit.kind
    if kind == "stem":
        q = unit.conv.shape[2]
        ops.append(_fold(unit.conv, unit.bn, f"{name}.conv+bn", pad=q // 2))
        ops.append(DeployOp("relu", f"{name}.relu"))
        return
    if kind == "patch_embed":
        ops.append(DeployOp("patch_embed", name,
                            {"w": unit.w.data.copy(), "b": unit.b.data.copy()},
                            {"patch": unit.patch}))
        return
    if kind == "basic":
        q = unit.q
        if unit.proj is not None:
            w, b = fold_bn_conv(unit.proj.data, None, unit.proj_bn.gamma.data,
                                unit.proj_bn.beta.data, unit.proj_bn.mean.data,
                                unit.proj_bn.var.data)
            ops.append(DeployOp("push_conv", f"{name}.proj+bn", {"w": w, "b": b},
                                {"stride": unit.stride, "pad": 0}))
        else:
            ops.append(DeployOp("push", f"{name}.residual"))
        ops.append(_fold(unit.conv1, unit.bn1, f"{name}.conv1+bn1", stride=unit.stride, pad=q // 2))
        ops.append(DeployOp("relu", f"{name}.relu1"))
        ops.append(_fold(unit.conv2, unit.bn2, f"{name}.conv2+bn2", pad=q // 2))
        ops.append(DeployOp("add", f"{name}.residual"))
        ops.append(DeployOp("relu", f"{name}.relu2"))
        return
    if kind == "bottleneck":
        q = unit.q
        if unit.proj is not None:
            w, b = fold_bn_conv(unit.proj.data, None, unit.proj_bn.gamma.data,
                                unit.proj_bn.beta.data, unit.proj_bn.mean.data,
                                unit.proj_bn.var.data)
            ops.append(DeployOp("push_conv", f"{name}.proj+bn", {"w": w, "b": b},
                                {"stride": unit.stride, "pad": 0}))
        else:
            ops.append(DeployOp("push", f"{name}.residual"))
        ops.append(_fold(unit.conv_red, unit.bn1, f"{name}.conv_red+bn1"))
        ops.append(DeployOp("relu", f"{name}.relu1"))
        ops.append(_fold(unit.conv_mid, unit.bn2, f"{name}.conv_mid+bn2",
                         stride=unit.stride, pad=q // 2))
        ops.append(DeployOp("relu", f"{name}.relu2"))
        ops.append(_fold(unit.conv_exp, unit.bn3, f"{name}.conv_exp+bn3"))
        ops.append(DeployOp("add", f"{name}.residual"))
        ops.append(DeployOp("relu", f"{name}.relu3"))
        return
    if kind == "vit":
        # LN stays dynamic: its statistics depend on the data
        ops.append(DeployOp("push", f"{name}.residual1"))
        ops.append(DeployOp("layer_norm", f"{name}.ln1",
                            {"gamma": unit.ln1.gamma.data.copy(), "beta": unit.ln1.beta.data.copy()},
                            {"eps": 1e-5}))
        ops.append(DeployOp("msa", f"{name}.msa",
                            {k: getattr(unit, k).data.copy()
                             for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")},
                            {"heads": unit.heads}))
        ops.append(DeployOp("add", f"{name}.residual1"))
        ops.append(DeployOp("push", f"{name}.residual2"))
        ops.append(DeployOp("layer_norm", f"{name}.ln2",
                            {"gamma": unit.ln2.gamma.data.copy(), "beta": unit.ln2.beta.data.copy()},
                            {"eps": 1e-5}))
        ops.append(DeployOp("linear", f"{name}.mlp1",
                            {"w": unit.mlp1.data.copy(), "b": unit.b_mlp1.data.copy()}))
        ops.append(DeployOp("gelu", f"{name}.gelu"))
        ops.append(DeployOp("linear", f"{name}.mlp2",
                            {"w": unit.mlp2.data.copy(), "b": unit.b_mlp2.data.copy()}))
        ops.append(DeployOp("add", f"{name}.residual2"))
        return
    if kind == "computing_basic":
        w_hat = unit.synthesized().data  # run the synthesis one final time
        w, b = fold_bn_conv(w_hat, None, unit.bn.gamma.data, unit.bn.beta.data,
                            unit.bn.mean.data, unit.bn.var.data)
        ops.append(DeployOp("push", f"{name}.residual"))
        ops.append(DeployOp("conv", f"{name}.synth+bn", {"w": w, "b": b},
                            {"stride": 1, "pad": unit.q // 2}))
        ops.append(DeployOp("add", f"{name}.residual"))
        ops.append(DeployOp("relu", f"{name}.relu"))
        return
    if kind == "computing_bottleneck":
        zero_red = np.zeros(unit.anchors["prev_red"].shape[0], dtype=unit.anchors["prev_red"].dtype)
        zero_mid = np.zeros(unit.mid, dtype=zero_red.dtype)
        w_exp, b_exp = fold_bn_conv(unit.anchors["next_exp"].data, None,
                                    unit.bn.gamma.data, unit.bn.beta.data,
                                    unit.bn.mean.data, unit.bn.var.data)
        ops.append(DeployOp("push", f"{name}.residual"))
        ops.append(DeployOp("conv", f"{name}.reduce",
                            {"w": unit.anchors["prev_red"].data.copy(), "b": zero_red},
                            {"stride": 1, "pad": 0}))
        ops.append(DeployOp("relu", f"{name}.relu1"))
        ops.append(DeployOp("conv", f"{name}.synth_mid",
                            {"w": unit.synthesized_mid().data, "b": zero_mid},
                            {"stride": 1, "pad": unit.q // 2}))
        ops.append(DeployOp("relu", f"{name}.relu2"))
        ops.append(DeployOp("conv", f"{name}.expand+bn", {"w": w_exp, "b": b_exp},
                            {"stride": 1, "pad": 0}))
        ops.append(DeployOp("add", f"{name}.residual"))
        ops.append(DeployOp("relu", f"{name}.relu3"))
        return
    if kind == "computing_vit":
        from .replacement import synth_vit_mlp, synth_vit_proj

        if unit.use_attn:
            w_hat, b_hat = synth_vit_proj(
                unit.anchors["wo_prev"], unit.anchors["wo_next"],
                unit.anchors["bo_prev"], unit.anchors["bo_next"],
                unit.attn_coeffs, unit.synth_mode, unit.heads, unit.eps)
            c_scale = 1.0 / math.sqrt(unit.dim) if unit.scale_mode == "inv_sqrt_d" else 1.0
            # the bias is added outside the scaled matmul in the dynamic path
            w_dep, _ = fold_linear(w_hat.data, np.zeros_like(b_hat.data), c_scale)
            ops.append(DeployOp("push", f"{name}.attn_residual"))
            if unit.synth_mode == "headwise":
                ops.append(DeployOp("layer_norm", f"{name}.anchored_ln1",
                                    {"gamma": unit.anchors["ln1_gamma"].data.copy(),
                                     "beta": unit.anchors["ln1_beta"].data.copy()},
                                    {"eps": 1e-5}))
            ops.append(DeployOp("linear", f"{name}.synth_proj*scale",
                                {"w": w_dep, "b": b_hat.data.copy()}))
            ops.append(DeployOp("add", f"{name}.attn_residual"))
        if unit.use_mlp:
            w1, b1, w2, b2 = synth_vit_mlp(
                unit.anchors["mlp1_prev"], unit.anchors["b_mlp1_prev"],
                unit.anchors["mlp2_prev"], unit.anchors["b_mlp2_prev"],
                unit.anchors["mlp1_next"], unit.anchors["b_mlp1_next"],
                unit.anchors["mlp2_next"], unit.anchors["b_mlp2_next"], unit.eps)
            ops.append(DeployOp("push", f"{name}.mlp_residual"))
            ops.append(DeployOp("layer_norm", f"{name}.anchored_ln2",
                                {"gamma": unit.anchors["ln2_gamma"].data.copy(),
                                 "beta": unit.anchors["ln2_beta"].data.copy()},
                                {"eps": 1e-5}))
            ops.append(DeployOp("linear", f"{name}.synth_mlp1",
                                {"w": w1.data, "b": b1.data}))
            ops.append(DeployOp("gelu", f"{name}.gelu"))
            ops.append(DeployOp("linear", f"{name}.synth_mlp2",
                                {"w": w2.data, "b": b2.data}))
            ops.append(DeployOp("add", f"{name}.mlp_residual"))
        return
    if kind == "avgpool":
        ops.append(DeployOp("avgpool", name))
        return
    if kind == "tokenpool":
        ops.append(DeployOp("tokenpool", name))
        return
    if kind == "head":
        ops.append(DeployOp("linear", name,
                            {"w": unit.w.data.copy(), "b": unit.b.data.copy()}))
        return
    raise ValueError(f"cannot export unit kind {kind!r}")


def export_deploy(net: Network, mode: str = "eval") -> DeployModel:
    """Materialize synthesized operators and fold all eval-mode conv+BN pairs."""
    if isinstance(net, DeployModel):
        raise TypeError("a DeployModel is terminal and cannot be re-exported")
    if mode != "eval":
        raise ValueError("deploy export requires an eval-mode network")
    ops: list[DeployOp] = []
    for name, unit in net.units:
        _emit_block(name, unit, ops)
    meta = {"family": net.spec.family, "method": net.spec.method}
    return DeployModel(ops, net.spec.num_classes, meta)


def equivalence_check(net: Network, deploy: DeployModel, inputs) -> float:
    """Max abs output difference between the dynamic eval path and the deploy program."""
    worst = 0.0
    for x in inputs:
        x = np.asarray(x)
        dynamic = net.forward(x, "eval").data
        static = deploy.forward(x)
        if dynamic.shape != static.shape:
            raise ValueError(
                f"equivalence check: shape mismatch {dynamic.shape} vs {static.shape}")
        worst = max(worst, float(np.abs(dynamic - static).max()))
    return worst
