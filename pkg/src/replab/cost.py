"""Exact parameter counts, FLOP counts, and activation-memory estimates.

Conventions, pinned once here:

* FLOPs: 1 multiply-accumulate = 2 FLOPs. Conv, matmul, and attention matmuls
  are counted; elementwise ops and normalizations are excluded by default and
  can be included via a coarse per-element table (``include_elementwise``).
* Weight-synthesis cost F_synth: per anchor element normalized, 3 FLOPs
  (square-accumulate + divide); per synthesized element mixed from two
  anchors, 4 FLOPs (two MACs); plain averages cost 2 FLOPs per element.
  F_synth depends only on weight extents, never on the input resolution.
* Activation memory is an analytic model: each op stores the listed tensors
  for backward (conv/linear/norm/activation store their input; attention
  stores q,k,v, the score matrix, and the two mix inputs; residual adds and
  pools store nothing). Bytes = elements x dtype size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .builder import Network, NetworkSpec, StageSpec, build_pair

MAC = 2  # FLOPs per multiply-accumulate

# coarse per-element costs used only when include_elementwise is on
ELEMWISE_COST = {"relu": 1, "gelu": 10, "add": 1, "bn": 4, "ln": 6, "softmax": 5,
                 "bias": 1, "pool": 1}


@dataclass
class SiteCost:
    name: str
    params_original: int
    params_computing: int
    flops_original: int
    flops_computing: int
    flops_synth: int

    @property
    def eta(self) -> float:
        return self.flops_computing / self.flops_original


@dataclass
class CostReport:
    params_e2e: int
    params_repl: int
    params_blocks_e2e: int
    params_blocks_repl: int
    flops_e2e: int
    flops_repl: int
    flops_synth: int
    act_mem_e2e: int
    act_mem_repl: int
    act_mem_bound: int
    act_mem_aux: int
    sites: list[SiteCost] = field(default_factory=list)

    @property
    def ratio_params(self) -> float:
        return self.params_repl / self.params_e2e

    @property
    def ratio_flops(self) -> float:
        return self.flops_repl / self.flops_e2e

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in (
            "params_e2e", "params_repl", "flops_e2e", "flops_repl", "flops_synth",
            "act_mem_e2e", "act_mem_repl", "act_mem_bound", "act_mem_aux")}
        rec["ratio_params"] = self.ratio_params
        rec["ratio_flops"] = self.ratio_flops
        rec["sites"] = [{"name": s.name, "P": s.params_original, "a": s.params_computing,
                         "F": s.flops_original, "F_tilde": s.flops_computing,
                         "F_synth": s.flops_synth, "eta": s.eta} for s in self.sites]
        return rec


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def coeff_params(extent: int, neighbors: str = "both", coeff_mode: str = "two") -> int:
    if coeff_mode == "one":
        return extent
    return 2 * extent if neighbors == "both" else extent


def param_count_block(spec: NetworkSpec, stage: StageSpec) -> tuple[int, int]:
    """(P, a) for a same-stage removable block and its computing layer."""
    q = spec.kernel
    c = stage.width
    if spec.family == "resnet_basic":
        p = 2 * c * c * q * q + 4 * c
        a = coeff_params(c, spec.neighbors, spec.coeff_mode) + 2 * c
        return p, a
    if spec.family == "resnet_bottleneck":
        b = stage.mid or stage.width // 4
        p = 2 * c * b + b * b * q * q + 4 * b + 2 * c
        a = coeff_params(b, spec.neighbors, spec.coeff_mode) + 2 * c
        return p, a
    d = stage.width
    dff = d * spec.vit_mlp_ratio
    p = 4 * (d * d + d) + (dff * d + dff) + (d * dff + d) + 4 * d
    a = 0
    if spec.vit_use_attn:
        extent = spec.vit_heads if spec.vit_synth == "headwise" else 1
        a = coeff_params(extent, spec.neighbors, spec.coeff_mode)
    return p, a


def _analytic_unit_params(spec: NetworkSpec, name: str, unit) -> int:
    """Closed-form parameter count per unit kind, from dimensions only."""
    kind = unit.kind
    q = spec.kernel
    if kind == "stem":
        c_out, c_in = unit.conv.shape[0], unit.conv.shape[1]
        return c_out * c_in * q * q + 2 * c_out
    if kind == "patch_embed":
        d, fan = unit.w.shape
        return d * fan + d
    if kind == "head":
        n, w = unit.w.shape
        return n * w + n
    if kind in ("avgpool", "tokenpool"):
        return 0
    if kind == "basic":
        c, c_in = unit.conv1.shape[0], unit.conv1.shape[1]
        total = c * c_in * q * q + c * c * q * q + 4 * c
        if unit.proj is not None:
            total += c * c_in + 2 * c
        return total
    if kind == "bottleneck":
        b, c_in = unit.conv_red.shape[0], unit.conv_red.shape[1]
        c = unit.conv_exp.shape[0]
        total = b * c_in + b * b * q * q + c * b + 4 * b + 2 * c
        if unit.proj is not None:
            total += c * c_in + 2 * c
        return total
    if kind == "vit":
        d, dff = unit.dim, unit.dff
        return 4 * (d * d + d) + (dff * d + dff) + (d * dff + d) + 4 * d
    if kind == "computing_basic":
        return coeff_params(unit.width, spec.neighbors, spec.coeff_mode) + 2 * unit.width
    if kind == "computing_bottleneck":
        return coeff_params(unit.mid, spec.neighbors, spec.coeff_mode) + 2 * unit.width
    if kind == "computing_vit":
        if not unit.use_attn:
            return 0
        extent = unit.heads if unit.synth_mode == "headwise" else 1
        return coeff_params(extent, spec.neighbors, spec.coeff_mode)
    raise ValueError(f"no parameter formula for unit kind {kind!r}")


class CountMismatch(RuntimeError):
    pass


def param_count_network(net: Network) -> dict:
    """Analytic counts and an independent registry walk; they must agree."""
    analytic = 0
    analytic_blocks = 0
    per_unit_walk: dict[str, int] = {}
    for name, unit in net.units:
        a = _analytic_unit_params(net.spec, name, unit)
        analytic += a
        if unit.kind not in ("stem", "patch_embed", "head", "avgpool", "tokenpool"):
            analytic_blocks += a
        per_unit_walk[name] = sum(p.size for _, p in unit.named_params())
    walked = sum(p.size for p in net.registry.params.values())
    if walked != analytic:
        detail = {n: (per_unit_walk[n], _analytic_unit_params(net.spec, n, u))
                  for n, u in net.units if per_unit_walk[n] != _analytic_unit_params(net.spec, n, u)}
        raise CountMismatch(f"analytic {analytic} != registry walk {walked}: {detail}")
    return {"analytic": analytic, "walked": walked, "blocks": analytic_blocks}


# ---------------------------------------------------------------------------
# FLOP counting
# ---------------------------------------------------------------------------

def _basic_block_macs(c_out: int, c_in: int, q: int, h: int, w: int, proj: bool) -> int:
    macs = c_out * c_in * q * q * h * w + c_out * c_out * q * q * h * w
    if proj:
        macs += c_out * c_in * h * w
    return macs


def _bottleneck_macs(c_out: int, c_in: int, b: int, q: int, h_in: int, w_in: int,
                     h: int, w: int, proj: bool) -> int:
    macs = b * c_in * h_in * w_in + b * b * q * q * h * w + c_out * b * h * w
    if proj:
        macs += c_out * c_in * h * w
    return macs


def _vit_block_macs(t: int, d: int, dff: int) -> int:
    return 3 * t * d * d + 2 * t * t * d + t * d * d + 2 * t * d * dff


def synth_flops(unit) -> int:
    """Weight-synthesis FLOPs, a function of anchor extents only."""
    kind = unit.kind
    if kind in ("computing_basic", "computing_bottleneck"):
        key = "prev_conv2" if kind == "computing_basic" else "prev_mid"
        n = unit.anchors[key].size
        return 2 * 3 * n + 4 * n  # normalize both anchors, mix channelwise
    if kind == "computing_vit":
        total = 0
        if unit.use_attn:
            n = unit.anchors["wo_prev"].size
            d = unit.anchors["bo_prev"].size
            if unit.synth_mode == "headwise":
                total += 2 * 3 * n + 4 * n + 2 * d
            else:
                total += 4 * n + 4 * d
        if unit.use_mlp:
            m = unit.anchors["mlp1_prev"].size + unit.anchors["mlp2_prev"].size
            biases = unit.anchors["b_mlp1_prev"].size + unit.anchors["b_mlp2_prev"].size
            total += 2 * 3 * m + 2 * m + 2 * biases
        return total
    return 0


def _elementwise_flops(unit, shape, out_shape) -> int:
    """Coarse optional accounting for the excluded-by-default ops."""
    kind = unit.kind
    cost = ELEMWISE_COST
    if kind == "stem":
        n = _numel(out_shape)
        return n * (cost["bn"] + cost["relu"])
    if kind == "basic":
        n = _numel(out_shape)
        return n * (2 * cost["bn"] + 2 * cost["relu"] + cost["add"])
    if kind == "bottleneck":
        n = _numel(out_shape)
        return n * (3 * cost["bn"] + 3 * cost["relu"] + cost["add"])
    if kind == "vit":
        bsz, t, d = out_shape
        n = bsz * t * d
        scores = bsz * unit.heads * t * t
        return (2 * n * cost["ln"] + scores * cost["softmax"]
                + bsz * t * unit.dff * cost["gelu"] + 2 * n * cost["add"] + 4 * n * cost["bias"])
    if kind == "computing_basic":
        n = _numel(out_shape)
        return n * (cost["bn"] + 2 * cost["relu"] + cost["add"])
    if kind == "computing_bottleneck":
        n = _numel(out_shape)
        return n * (cost["bn"] + 3 * cost["relu"] + cost["add"])
    if kind == "computing_vit":
        bsz, t, d = out_shape
        n = bsz * t * d
        total = 0
        if unit.use_attn:
            total += n * (cost["ln"] + cost["add"] + cost["bias"])
        if unit.use_mlp:
            total += n * (cost["ln"] + cost["add"] + cost["bias"])
            total += bsz * t * _mlp_dff(unit) * cost["gelu"]
        return total
    if kind in ("avgpool", "tokenpool"):
        return _numel(shape) * cost["pool"]
    if kind in ("head", "patch_embed"):
        return _numel(out_shape) * cost["bias"]
    return 0


def _mlp_dff(unit) -> int:
    return unit.anchors["mlp1_prev"].shape[0]


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _walk(net: Network, batch: int):
    """Yield (name, unit, in_shape, out_shape) tracking activation shapes."""
    spec = net.spec
    if spec.family == "vit":
        shape: tuple = (batch, spec.in_channels, spec.image_size, spec.image_size)
    else:
        shape = (batch, spec.in_channels, spec.image_size, spec.image_size)
    for name, unit in net.units:
        kind = unit.kind
        if kind == "stem":
            out = (batch, unit.conv.shape[0], shape[2], shape[3])
        elif kind == "patch_embed":
            out = (batch, spec.tokens(), unit.w.shape[0])
        elif kind in ("basic", "bottleneck"):
            stride = unit.stride
            out = (batch, unit.width, shape[2] // stride, shape[3] // stride)
        elif kind in ("computing_basic", "computing_bottleneck"):
            out = (batch, unit.width, shape[2], shape[3])
        elif kind in ("vit", "computing_vit"):
            out = shape
        elif kind == "avgpool":
            out = (batch, shape[1])
        elif kind == "tokenpool":
            out = (batch, shape[2])
        elif kind == "head":
            out = (batch, unit.w.shape[0])
        else:
            raise ValueError(f"unknown unit kind {kind!r}")
        yield name, unit, shape, out
        shape = out


def _unit_macs(spec: NetworkSpec, unit, in_shape, out_shape) -> int:
    kind = unit.kind
    q = spec.kernel
    if kind == "stem":
        b, c, h, w = out_shape
        return b * c * unit.conv.shape[1] * q * q * h * w
    if kind == "patch_embed":
        b, t, d = out_shape
        return b * t * d * unit.w.shape[1]
    if kind == "head":
        b, n = out_shape
        return b * n * unit.w.shape[1]
    if kind in ("avgpool", "tokenpool"):
        return 0
    b = out_shape[0]
    if kind == "basic":
        _, c, h, w = out_shape
        return b * _basic_block_macs(c, unit.conv1.shape[1], q, h, w, unit.proj is not None)
    if kind == "bottleneck":
        _, c, h, w = out_shape
        return b * _bottleneck_macs(c, unit.conv_red.shape[1], unit.mid, q,
                                    in_shape[2], in_shape[3], h, w, unit.proj is not None)
    if kind == "vit":
        _, t, d = out_shape
        return b * _vit_block_macs(t, d, unit.dff)
    if kind == "computing_basic":
        _, c, h, w = out_shape
        return b * c * c * q * q * h * w
    if kind == "computing_bottleneck":
        _, c, h, w = out_shape
        mid = unit.mid
        return b * (mid * c * h * w + mid * mid * q * q * h * w + c * mid * h * w)
    if kind == "computing_vit":
        _, t, d = out_shape
        total = 0
        if unit.use_attn:
            total += t * d * d
        if unit.use_mlp:
            total += 2 * t * d * _mlp_dff(unit)
        return b * total
    raise ValueError(f"no FLOP formula for unit kind {kind!r}")


def _removed_block_macs(spec: NetworkSpec, unit, out_shape) -> int:
    """MACs of the original same-stage block a computing layer replaced."""
    b = out_shape[0]
    q = spec.kernel
    if unit.kind == "computing_basic":
        _, c, h, w = out_shape
        return b * _basic_block_macs(c, c, q, h, w, proj=False)
    if unit.kind == "computing_bottleneck":
        _, c, h, w = out_shape
        return b * _bottleneck_macs(c, c, unit.mid, q, h, w, h, w, proj=False)
    _, t, d = out_shape
    dff = _mlp_dff(unit)
    return b * _vit_block_macs(t, d, dff)


def flop_count(net: Network, batch: int = 1, include_elementwise: bool = False) -> dict:
    """Counted FLOPs per unit plus per-site ratios for computing layers."""
    total = 0
    per_unit: dict[str, int] = {}
    synth_total = 0
    sites: list[dict] = []
    for name, unit, in_shape, out_shape in _walk(net, batch):
        f = MAC * _unit_macs(net.spec, unit, in_shape, out_shape)
        if include_elementwise:
            f += _elementwise_flops(unit, in_shape, out_shape)
        per_unit[name] = f
        total += f
        s = synth_flops(unit)
        synth_total += s
        if unit.kind in ("computing_basic", "computing_bottleneck", "computing_vit"):
            f_orig = MAC * _removed_block_macs(net.spec, unit, out_shape)
            if include_elementwise:
                f_orig += 0  # ratio is defined on the counted-op convention
            sites.append({"name": name, "flops_original": f_orig,
                          "flops_computing": f, "flops_synth": s,
                          "eta": f / f_orig})
    return {"total": total + synth_total, "per_unit": per_unit,
            "synth": synth_total, "sites": sites}


def vit_eta_formula(t: int, d: int) -> float:
    """Closed-form cost ratio of the basic token-wise replacement, dff = 4d."""
    return 1.0 / (12.0 + 2.0 * t / d)


# ---------------------------------------------------------------------------
# activation-memory model
# ---------------------------------------------------------------------------

def _unit_act_elems(spec: NetworkSpec, unit, in_shape, out_shape) -> int:
    kind = unit.kind
    n_in = _numel(in_shape)
    n_out = _numel(out_shape)
    if kind == "stem":
        return n_in + 2 * n_out  # conv in, bn in, relu in
    if kind == "patch_embed":
        return n_in
    if kind == "head":
        return n_in
    if kind in ("avgpool", "tokenpool"):
        return 0
    if kind == "basic":
        extra = 2 * n_in if unit.proj is not None else 0
        return n_in + 5 * n_out + extra
    if kind == "bottleneck":
        b = out_shape[0]
        mid = unit.mid
        h, w = out_shape[2], out_shape[3]
        n_mid = b * mid * h * w
        extra = 2 * n_in if unit.proj is not None else 0
        # conv_red in + (bn+relu+conv_mid) on mid + (bn+relu+conv_exp) + bn3 + relu
        return n_in + 3 * (b * mid * in_shape[2] * in_shape[3]) + 3 * n_mid + 2 * n_out + extra
    if kind == "vit":
        b, t, d = out_shape
        scores = b * unit.heads * t * t
        msa_elems = 6 * b * t * d + scores
        mlp_elems = b * t * d + 2 * b * t * unit.dff
        return 2 * b * t * d + msa_elems + mlp_elems  # two LN inputs as well
    if kind == "computing_basic":
        return n_in + 3 * n_out  # conv in, bn in, relu in x2
    if kind == "computing_bottleneck":
        b, c, h, w = out_shape
        n_mid = b * unit.mid * h * w
        return n_in + 4 * n_mid + 2 * n_out
    if kind == "computing_vit":
        b, t, d = out_shape
        total = 0
        if unit.use_attn:
            total += 3 * b * t * d  # ln in, matmul in, relu-free residual
        if unit.use_mlp:
            total += 2 * b * t * d + 2 * b * t * _mlp_dff(unit)
        return total
    raise ValueError(f"no memory formula for unit kind {kind!r}")


def _removed_block_act_elems(spec: NetworkSpec, unit, out_shape) -> int:
    if unit.kind == "computing_basic":
        return 6 * _numel(out_shape)
    if unit.kind == "computing_bottleneck":
        b, c, h, w = out_shape
        n_mid = b * unit.mid * h * w
        return _numel(out_shape) + 3 * n_mid + 3 * n_mid + 2 * _numel(out_shape)
    b, t, d = out_shape
    heads = unit.heads
    dff = _mlp_dff(unit)
    return 2 * b * t * d + 6 * b * t * d + b * heads * t * t + b * t * d + 2 * b * t * dff


def activation_memory_estimate(net: Network, batch: int) -> dict:
    """Model-based activation bytes, plus the per-site bound decomposition."""
    itemsize = net.dtype.itemsize
    total = 0
    sites = []
    aux = 0
    for name, unit, in_shape, out_shape in _walk(net, batch):
        elems = _unit_act_elems(net.spec, unit, in_shape, out_shape)
        total += elems
        if unit.kind in ("computing_basic", "computing_bottleneck", "computing_vit"):
            removed = _removed_block_act_elems(net.spec, unit, out_shape)
            sites.append({"name": name, "original_bytes": removed * itemsize,
                          "computing_bytes": elems * itemsize})
            aux += sum(p.size for _, p in unit.named_params())
            aux += sum(b.size for _, b in unit.named_buffers(name))
    return {"total_bytes": total * itemsize, "aux_bytes": aux * itemsize, "sites": sites}


# ---------------------------------------------------------------------------
# assembled report and the K trade-off curve
# ---------------------------------------------------------------------------

def cost_report(spec: NetworkSpec, seed=0, batch: int = 1) -> CostReport:
    e2e, variant = build_pair(spec, seed)
    p_e2e = param_count_network(e2e)
    p_var = param_count_network(variant)
    f_e2e = flop_count(e2e, batch)
    f_var = flop_count(variant, batch)
    m_e2e = activation_memory_estimate(e2e, batch)
    m_var = activation_memory_estimate(variant, batch)

    sites = []
    flop_sites = {s["name"]: s for s in f_var["sites"]}
    for si, r in variant.plan.sites() if spec.method == "repl" else []:
        name = f"s{si}.r{r}"
        p, a = param_count_block(spec, spec.stages[si])
        fs = flop_sites[name]
        sites.append(SiteCost(name, p, a, fs["flops_original"],
                              fs["flops_computing"], fs["flops_synth"]))

    saved = sum(s["original_bytes"] - s["computing_bytes"] for s in m_var["sites"])
    bound = m_e2e["total_bytes"] - saved + m_var["aux_bytes"]
    return CostReport(
        params_e2e=p_e2e["analytic"], params_repl=p_var["analytic"],
        params_blocks_e2e=p_e2e["blocks"], params_blocks_repl=p_var["blocks"],
        flops_e2e=f_e2e["total"], flops_repl=f_var["total"], flops_synth=f_var["synth"],
        act_mem_e2e=m_e2e["total_bytes"], act_mem_repl=m_var["total_bytes"],
        act_mem_bound=bound, act_mem_aux=m_var["aux_bytes"], sites=sites)


def interval_tradeoff(spec: NetworkSpec, k_values, eta_bar: float,
                      eps_bar: float = 0.0, pi_max: float = 1.0,
                      h_max: float = 1.0) -> list[dict]:
    """C(K)/C0 and the gradient-bias proxy (N/K) * eps * Pi * max(H,1) per K.

    The bias column is an empirical proxy assembled from measured hats, not a
    claim about the true gradient-bias constant.
    """
    n = spec.depth
    rows = []
    for k in k_values:
        if k < 2:
            raise ValueError(f"replacement interval K must be >= 2, got {k}")
        rows.append({
            "K": k,
            "relative_cost": 1.0 - (1.0 - eta_bar) / k,
            "bias_proxy": (n / k) * eps_bar * pi_max * max(h_max, 1.0),
        })
    return rows
