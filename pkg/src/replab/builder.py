"""Removal planning and network assembly.

Builds three network flavors from one declarative spec: the full-depth
baseline, the remove-only ablation (removed blocks deleted, survivors rewired)
and the replacement network (computing layers inserted at removed positions,
anchored to their retained neighbors).

Block indices are 1-based within each stage; removed indices are the multiples
of K strictly below the stage length, so block 1 and the last block are always
kept and no two removed blocks are adjacent for K >= 2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from . import replacement as R
from .tensor import Parameter, Tensor, conv2d, linear, relu, reshape, tmean, transpose


@dataclass
class StageSpec:
    blocks: int
    width: int
    mid: int | None = None  # bottleneck middle width; defaults to width // 4


@dataclass
class NetworkSpec:
    family: str  # resnet_basic | resnet_bottleneck | vit
    stages: list[StageSpec]
    num_classes: int
    in_channels: int = 1
    image_size: int = 8
    kernel: int = 3
    K: int = 4
    method: str = "e2e"  # e2e | remove_only | repl
    neighbors: str = "both"  # both | prev_only | next_only
    coeff_mode: str = "two"  # two | one
    vit_heads: int = 2
    vit_mlp_ratio: int = 4
    vit_synth: str = "headwise"  # scalar | headwise
    vit_use_attn: bool = True
    vit_use_mlp: bool = True
    patch_size: int = 4

    def validate(self) -> None:
        if self.family not in ("resnet_basic", "resnet_bottleneck", "vit"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.K < 2:
            raise ValueError(f"replacement interval K must be >= 2, got {self.K}")
        if not self.stages or any(s.blocks < 1 for s in self.stages):
            raise ValueError("every stage needs at least one block")
        if self.method not in ("e2e", "remove_only", "repl"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.neighbors not in ("both", "prev_only", "next_only"):
            raise ValueError(f"unknown neighbor mode {self.neighbors!r}")
        if self.coeff_mode not in ("two", "one"):
            raise ValueError(f"unknown coefficient mode {self.coeff_mode!r}")
        if self.coeff_mode == "one" and self.neighbors != "both":
            raise ValueError("single-coefficient mode requires neighbors=both")
        if self.family == "vit":
            if len(self.stages) != 1:
                raise ValueError("vit specs use a single stage")
            d = self.stages[0].width
            if d % self.vit_heads != 0:
                raise ValueError(f"vit width {d} not divisible by {self.vit_heads} heads")
            if self.image_size % self.patch_size != 0:
                raise ValueError("image size must be a multiple of the patch size")
            if self.vit_synth not in ("scalar", "headwise"):
                raise ValueError(f"unknown vit synthesis mode {self.vit_synth!r}")
        else:
            if self.kernel % 2 != 1:
                raise ValueError("cnn kernel size must be odd")
            if self.image_size % (2 ** (len(self.stages) - 1)) != 0:
                raise ValueError("image size must survive the stage-transition strides")

    @property
    def depth(self) -> int:
        return sum(s.blocks for s in self.stages)

    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class RemovalPlan:
    stages: list[list[int]]  # sorted 1-based removed indices per stage
    total_blocks: int

    @property
    def R(self) -> int:
        return sum(len(s) for s in self.stages)

    @property
    def rho(self) -> float:
        return self.R / self.total_blocks

    def sites(self) -> list[tuple[int, int]]:
        return [(si, r) for si, idxs in enumerate(self.stages) for r in idxs]


def removal_set(length: int, interval: int) -> set[int]:
    """Indices {mK : m >= 1, mK < L}; the last block is always kept."""
    if interval < 2:
        raise ValueError(f"replacement interval K must be >= 2, got {interval}")
    if length < 1:
        raise ValueError(f"stage length must be >= 1, got {length}")
    return {m * interval for m in range(1, (length - 1) // interval + 1)}


def stage_removal_plan(spec: NetworkSpec) -> RemovalPlan:
    """Apply the removal rule independently per stage; never across boundaries."""
    spec.validate()
    return RemovalPlan(
        stages=[sorted(removal_set(s.blocks, spec.K)) for s in spec.stages],
        total_blocks=spec.depth,
    )


# ---------------------------------------------------------------------------
# non-block units
# ---------------------------------------------------------------------------

@dataclass
class ConvStem:
    conv: Parameter
    bn: B.BNState
    kind: str = "stem"

    def forward(self, x, mode):
        q = self.conv.shape[2]
        return relu(self.bn(conv2d(x, self.conv, stride=1, pad=q // 2), mode))

    def named_params(self):
        yield self.conv.pid, self.conv
        yield self.bn.gamma.pid, self.bn.gamma
        yield self.bn.beta.pid, self.bn.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.bn.mean", self.bn.mean
        yield f"{prefix}.bn.var", self.bn.var


@dataclass
class PatchEmbed:
    w: Parameter
    b: Parameter
    patch: int
    kind: str = "patch_embed"

    def forward(self, x, mode):
        bsz, c, h, wdim = x.shape
        ps = self.patch
        hn, wn = h // ps, wdim // ps
        t = reshape(x, (bsz, c, hn, ps, wn, ps))
        t = transpose(t, (0, 2, 4, 1, 3, 5))
        t = reshape(t, (bsz, hn * wn, c * ps * ps))
        return linear(t, self.w, self.b)

    def named_params(self):
        yield self.w.pid, self.w
        yield self.b.pid, self.b

    def named_buffers(self, prefix):
        return iter(())


@dataclass
class GlobalAvgPool:
    kind: str = "avgpool"

    def forward(self, x, mode):
        return tmean(x, axis=(2, 3))

    def named_params(self):
        return iter(())

    def named_buffers(self, prefix):
        return iter(())


@dataclass
class TokenMeanPool:
    kind: str = "tokenpool"

    def forward(self, x, mode):
        return tmean(x, axis=1)

    def named_params(self):
        return iter(())

    def named_buffers(self, prefix):
        return iter(())


@dataclass
class LinearHead:
    w: Parameter
    b: Parameter
    kind: str = "head"

    def forward(self, x, mode):
        return linear(x, self.w, self.b)

    def named_params(self):
        yield self.w.pid, self.w
        yield self.b.pid, self.b

    def named_buffers(self, prefix):
        return iter(())


# ---------------------------------------------------------------------------
# registry and network
# ---------------------------------------------------------------------------

@dataclass
class ParamRegistry:
    """Ordered maps of trainable parameters and non-trainable buffers."""

    params: dict[str, Parameter] = field(default_factory=dict)
    buffers: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)  # retained|computing|head

    def add_unit(self, name: str, unit, group: str) -> None:
        for pid, p in unit.named_params():
            if pid in self.params:
                raise ValueError(f"duplicate parameter id {pid!r}")
            self.params[pid] = p
            self.groups[pid] = group
        for bid, buf in unit.named_buffers(name):
            if bid in self.buffers:
                raise ValueError(f"duplicate buffer id {bid!r}")
            self.buffers[bid] = buf

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def decay_exempt_ids(self) -> set[str]:
        return {pid for pid, p in self.params.items() if p.decay_exempt}


@dataclass
class Site:
    stage: int
    index: int  # 1-based within the stage

    @property
    def block_name(self) -> str:
        return f"s{self.stage}.b{self.index}"

    @property
    def layer_name(self) -> str:
        return f"s{self.stage}.r{self.index}"


class Network:
    """Ordered executable units plus the parameter registry behind them."""

    def __init__(self, spec: NetworkSpec, units: list[tuple[str, object]],
                 plan: RemovalPlan, sites: list[Site]):
        self.spec = spec
        self.units = units
        self.plan = plan
        self.sites = sites
        self.registry = ParamRegistry()
        computing_names = {s.layer_name for s in sites}
        for name, unit in units:
            if name in ("head",):
                group = "head"
            elif name in computing_names:
                group = "computing"
            else:
                group = "retained"
            self.registry.add_unit(name, unit, group)

    def unit_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.units):
            if n == name:
                return i
        raise KeyError(f"no unit named {name!r}")

    def run_units(self, x, mode: str, start: int = 0, stop: int | None = None) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for _, unit in self.units[start:stop]:
            h = unit.forward(h, mode)
        return h

    def forward(self, x, mode: str = "eval") -> Tensor:
        return self.run_units(x, mode)

    def cast(self, dtype) -> "Network":
        """In-place precision switch for every parameter and buffer."""
        for p in self.registry.params.values():
            p.data = p.data.astype(dtype)
        for b in self.registry.buffers.values():
            b.data = b.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.registry.params.values())).dtype


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _build_full(spec: NetworkSpec, seed) -> dict[str, object]:
    """Every original unit (stem, all blocks, pool, head), keyed by name.

    The rng stream is consumed in a fixed order so that networks built with
    different methods from the same (spec, seed) share identical initial
    values for every retained unit.
    """
    rng = np.random.default_rng(seed)
    units: dict[str, object] = {}
    if spec.family == "vit":
        stage = spec.stages[0]
        d = stage.width
        fan_in = spec.in_channels * spec.patch_size**2
        units["stem"] = PatchEmbed(
            w=Parameter(B.kaiming_uniform(rng, (d, fan_in), fan_in), "stem.w"),
            b=Parameter(np.zeros(d), "stem.b"),
            patch=spec.patch_size,
        )
        for i in range(1, stage.blocks + 1):
            units[f"s0.b{i}"] = B.init_vit_block(
                d, spec.vit_heads, spec.vit_mlp_ratio, prefix=f"s0.b{i}", seed=rng)
        units["pool"] = TokenMeanPool()
        head_in = d
    else:
        q = spec.kernel
        w0 = spec.stages[0].width
        units["stem"] = ConvStem(
            conv=Parameter(B.kaiming_uniform(rng, (w0, spec.in_channels, q, q),
                                             spec.in_channels * q * q), "stem.conv"),
            bn=B.init_bn(w0, "stem.bn"),
        )
        c_in = w0
        for si, stage in enumerate(spec.stages):
            for i in range(1, stage.blocks + 1):
                stride = 2 if (si > 0 and i == 1) else 1
                prefix = f"s{si}.b{i}"
                if spec.family == "resnet_basic":
                    units[prefix] = B.init_basic_block(
                        stage.width, q, c_in=c_in, stride=stride, prefix=prefix, seed=rng)
                else:
                    mid = stage.mid or stage.width // 4
                    units[prefix] = B.init_bottleneck_block(
                        stage.width, mid, q, c_in=c_in, stride=stride, prefix=prefix, seed=rng)
                c_in = stage.width
        units["pool"] = GlobalAvgPool()
        head_in = spec.stages[-1].width
    units["head"] = LinearHead(
        w=Parameter(B.kaiming_uniform(rng, (spec.num_classes, head_in), head_in), "head.w"),
        b=Parameter(np.zeros(spec.num_classes), "head.b"),
    )
    return units


def _make_computing_layer(spec: NetworkSpec, site: Site, full: dict[str, object]):
    prev = full[f"s{site.stage}.b{site.index - 1}"]
    nxt = full[f"s{site.stage}.b{site.index + 1}"]
    prefix = site.layer_name
    if spec.family == "resnet_basic":
        return R.make_computing_basic(prev, nxt, prefix, spec.neighbors, spec.coeff_mode)
    if spec.family == "resnet_bottleneck":
        return R.make_computing_bottleneck(prev, nxt, prefix, spec.neighbors, spec.coeff_mode)
    return R.make_computing_vit(prev, nxt, prefix, spec.vit_synth,
                                spec.vit_use_attn, spec.vit_use_mlp,
                                spec.neighbors, spec.coeff_mode)


def _assemble(spec: NetworkSpec, full: dict[str, object]) -> Network:
    plan = stage_removal_plan(spec)
    apply_plan = spec.method != "e2e"
    sites = [Site(si, r) for si, r in plan.sites()] if apply_plan else []
    removed = {s.block_name for s in sites}
    ordered: list[tuple[str, object]] = [("stem", full["stem"])]
    for si, stage in enumerate(spec.stages):
        for i in range(1, stage.blocks + 1):
            name = f"s{si}.b{i}"
            if name not in removed:
                ordered.append((name, full[name]))
            elif spec.method == "repl":
                site = Site(si, i)
                ordered.append((site.layer_name, _make_computing_layer(spec, site, full)))
    ordered.append(("pool", full["pool"]))
    ordered.append(("head", full["head"]))
    kept_plan = plan if apply_plan else RemovalPlan([[] for _ in spec.stages], spec.depth)
    kept_sites = sites if spec.method == "repl" else []
    return Network(spec, ordered, kept_plan, kept_sites)


def build_network(spec: NetworkSpec, seed=0) -> Network:
    spec.validate()
    return _assemble(spec, _build_full(spec, seed))


def build_pair(spec: NetworkSpec, seed=0) -> tuple[Network, Network]:
    """Full-depth network and its method variant, sharing retained parameters."""
    spec.validate()
    full = _build_full(spec, seed)
    e2e = _assemble(dataclasses.replace(spec, method="e2e"), full)
    variant = _assemble(spec, full)
    return e2e, variant


def hybrid_network(e2e: Network, repl: Network, j: int) -> Network:
    """Chain with the first ``j`` removal sites replaced, the rest original.

    Shares every unit object with its source network, so hybrid_0 is the
    full-depth chain and hybrid_R is the replacement chain.
    """
    if e2e.spec.depth != repl.spec.depth:
        raise ValueError("hybrid: networks come from different plans")
    swapped = {s.block_name: s.layer_name for s in repl.sites[:j]}
    repl_units = dict(repl.units)
    ordered = []
    for name, unit in e2e.units:
        if name in swapped:
            lname = swapped[name]
            ordered.append((lname, repl_units[lname]))
        else:
            ordered.append((name, unit))
    return Network(repl.spec, ordered, repl.plan, repl.sites[:j])


def freeze_anchors(net: Network) -> Network:
    """Twin network whose computing layers read constant anchor snapshots."""
    ordered = []
    for name, unit in net.units:
        if getattr(unit, "kind", "") in R.COMPUTING_KINDS:
            ordered.append((name, R.freeze_layer_anchors(unit)))
        else:
            ordered.append((name, unit))
    return Network(net.spec, ordered, net.plan, net.sites)


def network_forward(net: Network, x, mode: str = "eval") -> Tensor:
    return net.forward(x, mode)
