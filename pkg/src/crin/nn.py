"""The CRIN architecture: reference encoder, multi-task interaction (MTI)
decoder blocks, cross-scale interaction (CSI) blocks, task heads, and the
ablation variants (baseline, naive multitask, MTI-only, full).

Channel layout convention: a decoder stage carries ``[f_b | f_s | f_r]``
(building-specific, shared, road-specific) blocks of equal width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError, Tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrinConfig:
    stage_widths: tuple[int, ...] = (48, 96, 192, 384)
    task_split: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    branch_kernels: tuple = ("skip", 7, 11, 21)
    init_kernel: int = 5
    mlp_reduction: int = 4
    in_channels: int = 3
    use_norm: bool = True

    def __post_init__(self):
        if abs(sum(self.task_split) - 1.0) > 1e-9:
            raise ValueError(f"task_split {self.task_split} must sum to 1")
        for w in self.stage_widths:
            for frac in self.task_split:
                if abs(w * frac - round(w * frac)) > 1e-9 or round(w * frac) < 1:
                    raise ValueError(
                        f"stage width {w} times split fraction {frac} is not a "
                        f"positive integer")
        skips = [k for k in self.branch_kernels if k == "skip"]
        if len(skips) != 1:
            raise ValueError("branch_kernels must contain the skip branch exactly once")
        for k in self.branch_kernels:
            if k != "skip" and (not isinstance(k, int) or k % 2 == 0 or k < 1):
                raise ValueError(f"branch kernel {k!r} must be a positive odd integer")
        if self.init_kernel % 2 == 0:
            raise ValueError("init_kernel must be odd")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def task_channels(self, width: int) -> tuple[int, int, int]:
        return tuple(round(width * f) for f in self.task_split)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named, ordered collection of tensors with optimizer state slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._learnable: set[str] = set()
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def register(self, name: str, t: Tensor, learnable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t.requires_grad = learnable
        self._params[name] = t
        if learnable:
            self._learnable.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def learnable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if n in self._learnable)

    def is_learnable(self, name: str) -> bool:
        return name in self._learnable

    def element_count(self, learnable_only: bool = True) -> int:
        items = self.learnable_items() if learnable_only else self.items()
        return sum(t.data.size for _, t in items)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} does not match {t.data.shape}")
            t.data[...] = arr.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str,
                 in_ch: int, out_ch: int, kernel: int | tuple[int, int],
                 stride: int = 1, groups: int = 1, bias: bool = True,
                 dtype=np.float32):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.name = name
        self.spec = ConvSpec.same(in_ch, out_ch, kh, kw, stride=stride,
                                  groups=groups, has_bias=bias)
        fan_in = (in_ch // groups) * kh * kw
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_ch, in_ch // groups, kh, kw))
        self.weight = store.register(name + ".weight", Tensor(w.astype(dtype)))
        self.bias = None
        if bias:
            self.bias = store.register(name + ".bias",
                                       Tensor(np.zeros(out_ch, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        with T.scope(self.name):
            return T.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int,
                 momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.register(name + ".gamma",
                                    Tensor(np.ones(channels, dtype=dtype)))
        self.beta = store.register(name + ".beta",
                                   Tensor(np.zeros(channels, dtype=dtype)))
        self.running_mean = store.register(
            name + ".running_mean", Tensor(np.zeros(channels, dtype=dtype)),
            learnable=False)
        self.running_var = store.register(
            name + ".running_var", Tensor(np.ones(channels, dtype=dtype)),
            learnable=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        with T.scope(self.name):
            return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                                self.running_var, training,
                                momentum=self.momentum, eps=self.eps)


class Linear:
    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str,
                 in_dim: int, out_dim: int, dtype=np.float32):
        self.name = name
        std = math.sqrt(2.0 / in_dim)
        w = rng.normal(0.0, std, size=(out_dim, in_dim))
        self.weight = store.register(name + ".weight", Tensor(w.astype(dtype)))
        self.bias = store.register(name + ".bias",
                                   Tensor(np.zeros(out_dim, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        with T.scope(self.name):
            return T.linear(x, self.weight, self.bias)


class ConvBlock:
    """Conv followed by optional BN and ReLU."""

    def __init__(self, store, rng, name, in_ch, out_ch, kernel, stride=1,
                 groups=1, use_norm=True, act=True, dtype=np.float32):
        self.conv = Conv2d(store, rng, name, in_ch, out_ch, kernel,
                           stride=stride, groups=groups, bias=not use_norm,
                           dtype=dtype)
        self.bn = BatchNorm2d(store, name + ".bn", out_ch, dtype=dtype) if use_norm else None
        self.act = act

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, training)
        if self.act:
            y = T.relu(y)
        return y


# ---------------------------------------------------------------------------
# stage features
# ---------------------------------------------------------------------------

@dataclass
class StageFeatures:
    """Building-specific, shared, and road-specific channel blocks at one
    decoder resolution; concatenated layout is ``[f_b | f_s | f_r]``."""
    f_b: Tensor
    f_s: Tensor
    f_r: Tensor

    def __post_init__(self):
        nb, ns, nr = self.f_b.shape, self.f_s.shape, self.f_r.shape
        if not (nb[0] == ns[0] == nr[0] and nb[2:] == ns[2:] == nr[2:]):
            raise ShapeError(
                f"StageFeatures blocks disagree on (N, H, W): {nb}, {ns}, {nr}")

    def concat(self) -> Tensor:
        return T.channel_concat(self.f_b, self.f_s, self.f_r)

    @classmethod
    def split(cls, t: Tensor, sizes: tuple[int, int, int]) -> "StageFeatures":
        return cls(*T.channel_split(t, sizes))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class Encoder:
    """Reference encoder: stride-1 stem, then one stride-2 entry conv plus one
    stride-1 conv per stage, each with BN + ReLU.  A final stride-2 bottleneck
    block halves resolution once more so every decoder stage can start with an
    explicit x2 upsample."""

    def __init__(self, store, rng, name, config: CrinConfig, dtype=np.float32):
        self.name = name
        self.config = config
        w0 = config.stage_widths[0]
        un = config.use_norm
        self.stem = ConvBlock(store, rng, f"{name}.stem", config.in_channels,
                              w0, 3, use_norm=un, dtype=dtype)
        self.stages = []
        prev = w0
        for i, w in enumerate(config.stage_widths):
            entry = ConvBlock(store, rng, f"{name}.stage{i}.conv0", prev, w, 3,
                              stride=2, use_norm=un, dtype=dtype)
            refine = ConvBlock(store, rng, f"{name}.stage{i}.conv1", w, w, 3,
                               use_norm=un, dtype=dtype)
            self.stages.append((entry, refine))
            prev = w
        self.bottleneck = ConvBlock(store, rng, f"{name}.bottleneck", prev, prev,
                                    3, stride=2, use_norm=un, dtype=dtype)

    def __call__(self, image: Tensor, training: bool) -> tuple[list[Tensor], Tensor]:
        n_halvings = len(self.stages) + 1
        div = 2 ** n_halvings
        _, c, h, w = image.shape
        if c != self.config.in_channels:
            raise ShapeError(
                f"encoder expects {self.config.in_channels} input channels, got {c}")
        if h % div or w % div:
            raise ShapeError(
                f"input spatial dims {h}x{w} must be divisible by {div} "
                f"({len(self.stages)} stages plus the bottleneck halving)")
        x = self.stem(image, training)
        skips = []
        for entry, refine in self.stages:
            x = refine(entry(x, training), training)
            skips.append(x)
        return skips, self.bottleneck(x, training)


# ---------------------------------------------------------------------------
# MTI block
# ---------------------------------------------------------------------------

class MTIBlock:
    """Multi-task interaction: inner-task fusion via an alternation-ordered
    group-2 convolution, then projection into building / shared / road spaces.

    Fusion input channel order is ``[d_b | d_s | s_b | d_r | d_s | s_r]``:
    decoder task block plus the shared block interleaved with the laterally
    projected skip block for that task.  The shared block feeds both groups.
    """

    def __init__(self, store, rng, name, width, config: CrinConfig, dtype=np.float32):
        self.name = name
        cb, cs, cr = config.task_channels(width)
        if not (cb == cs == cr):
            raise ShapeError("MTI requires equal task/shared channel blocks")
        c = cb
        self.c_task = c
        un = config.use_norm
        self.lateral = ConvBlock(store, rng, f"{name}.lateral", width, 2 * c, 1,
                                 use_norm=un, dtype=dtype)
        self.fuse = ConvBlock(store, rng, f"{name}.fuse", 6 * c, 2 * c, 3,
                              groups=2, use_norm=un, dtype=dtype)
        self.p_b = ConvBlock(store, rng, f"{name}.p_b", c, c, 1, use_norm=un, dtype=dtype)
        self.p_r = ConvBlock(store, rng, f"{name}.p_r", c, c, 1, use_norm=un, dtype=dtype)
        self.p_s = ConvBlock(store, rng, f"{name}.p_s", 2 * c, c, 1, use_norm=un, dtype=dtype)

    def __call__(self, dec: StageFeatures, skip: Tensor, training: bool) -> StageFeatures:
        c = self.c_task
        if dec.f_b.shape[1] != c:
            raise ShapeError(
                f"MTI decoder feature block width {dec.f_b.shape[1]} does not "
                f"match configured task width {c}")
        if skip.shape[2:] != dec.f_b.shape[2:]:
            raise ShapeError(
                f"MTI skip resolution {skip.shape[2:]} does not match decoder "
                f"resolution {dec.f_b.shape[2:]} (upsample first)")
        lat = self.lateral(skip, training)
        s_b, s_r = T.channel_split(lat, (c, c))
        fused_in = T.channel_concat(dec.f_b, dec.f_s, s_b, dec.f_r, dec.f_s, s_r)
        g = self.fuse(fused_in, training)
        g_b, g_r = T.channel_split(g, (c, c))
        f_b = self.p_b(g_b, training)
        f_r = self.p_r(g_r, training)
        f_s = self.p_s(T.channel_concat(g_b, g_r), training)
        return StageFeatures(f_b, f_s, f_r)


# ---------------------------------------------------------------------------
# CSI block
# ---------------------------------------------------------------------------

class CSIBlock:
    """Cross-scale interaction: depthwise 5x5 init, strip-decomposed large
    kernel branches plus a skip branch, and a per-channel softmax over scales.

    Branch convolutions carry no activation so the skip branch is exactly the
    initial feature.  The MLP operates on the pooled branch sum; attention is
    normalized over the scale axis, so per channel the four weights sum to 1.
    """

    def __init__(self, store, rng, name, width, config: CrinConfig, dtype=np.float32):
        self.name = name
        self.width = width
        self.kernels = config.branch_kernels
        self.dconv_init = Conv2d(store, rng, f"{name}.init", width, width,
                                 config.init_kernel, groups=width, dtype=dtype)
        self.branches = {}
        for k in self.kernels:
            if k == "skip":
                continue
            col = Conv2d(store, rng, f"{name}.k{k}.col", width, width, (k, 1),
                         groups=width, dtype=dtype)
            row = Conv2d(store, rng, f"{name}.k{k}.row", width, width, (1, k),
                         groups=width, dtype=dtype)
            self.branches[k] = (col, row)
        hidden = max(width // config.mlp_reduction, 1)
        self.mlp1 = Linear(store, rng, f"{name}.mlp1", width, hidden, dtype=dtype)
        self.mlp2 = Linear(store, rng, f"{name}.mlp2", hidden,
                           len(self.kernels) * width, dtype=dtype)
        self.last_attn: np.ndarray | None = None  # eval-time probe for analysis

    def __call__(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.width:
            raise ShapeError(
                f"CSI input channels {x.shape[1]} do not match stage width {self.width}")
        n = x.shape[0]
        f_init = self.dconv_init(x)
        outs = []
        for k in self.kernels:
            if k == "skip":
                outs.append(f_init)
            else:
                col, row = self.branches[k]
                outs.append(row(col(f_init)))  # column-wise (kx1) first
        total = outs[0]
        for b in outs[1:]:
            total = T.add(total, b)
        pooled = T.reshape(T.global_avg_pool(total), (n, self.width))
        h = T.relu(self.mlp1(pooled))
        logits = self.mlp2(h)
        attn = T.softmax(T.reshape(logits, (n, len(self.kernels), self.width)), axis=1)
        out = None
        for i, b in enumerate(outs):
            w_i = T.reshape(T.narrow(attn, 1, i, 1), (n, self.width, 1, 1))
            term = T.mul(b, w_i)
            out = term if out is None else T.add(out, term)
        if not training:
            self.last_attn = attn.data.copy()
        return out, attn


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

VARIANTS = ("baseline", "naive_multitask", "mti_only", "full_crin")


@dataclass
class ForwardResult:
    building_logits: Tensor
    road_logits: Tensor
    aux: list  # per-stage StageFeatures (shallowest last); empty for non-MTI variants


def _upsample_to(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    while x.shape[2] < target_hw[0]:
        x = T.upsample2x(x, "bilinear")
    if x.shape[2:] != tuple(target_hw):
        raise ShapeError(
            f"cannot upsample {x.shape[2:]} to {target_hw} by doubling")
    return x


class CrinModel:
    """Encoder-decoder with per-stage MTI (and optionally CSI) blocks and
    auxiliary deep-supervision heads."""

    def __init__(self, config: CrinConfig, seed: int = 0, use_csi: bool = True,
                 dtype=np.float32):
        self.config = config
        self.use_csi = use_csi
        self.dtype = dtype
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC21]))
        st, un = self.store, config.use_norm
        self.encoder = Encoder(st, rng, "encoder", config, dtype=dtype)
        widths = config.stage_widths
        # decoder runs deepest stage first
        self.dec_widths = list(reversed(widths))
        self.transitions = []
        self.mti_blocks = []
        self.csi_blocks = []
        self.aux_heads = []
        prev = widths[-1]  # bottleneck channels
        for d, w in enumerate(self.dec_widths):
            groups = 1 if d == 0 else 3  # bottleneck is not in task layout yet
            self.transitions.append(ConvBlock(
                st, rng, f"decoder.stage{d}.transition", prev, w, 1,
                groups=groups, use_norm=un, dtype=dtype))
            self.mti_blocks.append(MTIBlock(st, rng, f"decoder.stage{d}.mti",
                                            w, config, dtype=dtype))
            if use_csi:
                self.csi_blocks.append(CSIBlock(st, rng, f"decoder.stage{d}.csi",
                                                w, config, dtype=dtype))
            c = config.task_channels(w)[0]
            self.aux_heads.append((
                Conv2d(st, rng, f"decoder.stage{d}.aux_b", 2 * c, 1, 1, dtype=dtype),
                Conv2d(st, rng, f"decoder.stage{d}.aux_r", 2 * c, 1, 1, dtype=dtype),
            ))
            prev = w
        c0 = config.task_channels(widths[0])[0]
        self.head_b = Conv2d(st, rng, "head.building", 2 * c0, 1, 1, dtype=dtype)
        self.head_r = Conv2d(st, rng, "head.road", 2 * c0, 1, 1, dtype=dtype)

    def forward(self, image: Tensor, training: bool = True) -> ForwardResult:
        cfg = self.config
        skips, x = self.encoder(image, training)
        aux: list[StageFeatures] = []
        sf = None
        for d, w in enumerate(self.dec_widths):
            x = T.upsample2x(x, "bilinear")
            x = self.transitions[d](x, training)
            sf = StageFeatures.split(x, cfg.task_channels(w))
            skip = skips[len(skips) - 1 - d]
            sf = self.mti_blocks[d](sf, skip, training)
            x = sf.concat()
            if self.use_csi:
                x, _ = self.csi_blocks[d](x, training)
                sf = StageFeatures.split(x, cfg.task_channels(w))
            aux.append(sf)
        h, w_ = image.shape[2], image.shape[3]
        b = self.head_b(T.channel_concat(sf.f_b, sf.f_s))
        r = self.head_r(T.channel_concat(sf.f_r, sf.f_s))
        b = _upsample_to(b, (h, w_))
        r = _upsample_to(r, (h, w_))
        return ForwardResult(b, r, aux)


class UNetModel:
    """Conventional U-Net-style decoder (concat skip + two 3x3 convs per
    stage) with one or two 1x1 classifier heads."""

    def __init__(self, config: CrinConfig, seed: int = 0, heads: int = 2,
                 name: str = "", dtype=np.float32):
        self.config = config
        self.heads = heads
        self.dtype = dtype
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC22]))
        st, un = self.store, config.use_norm
        prefix = (name + ".") if name else ""
        self.encoder = Encoder(st, rng, prefix + "encoder", config, dtype=dtype)
        widths = config.stage_widths
        self.dec_widths = list(reversed(widths))
        self.blocks = []
        prev = widths[-1]
        for d, w in enumerate(self.dec_widths):
            skip_w = widths[len(widths) - 1 - d]
            conv0 = ConvBlock(st, rng, f"{prefix}decoder.stage{d}.conv0",
                              prev + skip_w, w, 3, use_norm=un, dtype=dtype)
            conv1 = ConvBlock(st, rng, f"{prefix}decoder.stage{d}.conv1",
                              w, w, 3, use_norm=un, dtype=dtype)
            self.blocks.append((conv0, conv1))
            prev = w
        self.head_convs = [
            Conv2d(st, rng, f"{prefix}head.{task}", widths[0], 1, 1, dtype=dtype)
            for task in (("building", "road")[:heads])
        ]

    def forward(self, image: Tensor, training: bool = True) -> ForwardResult:
        skips, x = self.encoder(image, training)
        for d, (conv0, conv1) in enumerate(self.blocks):
            x = T.upsample2x(x, "bilinear")
            x = conv1(conv0(T.channel_concat(x, skips[len(skips) - 1 - d]),
                            training), training)
        hw = (image.shape[2], image.shape[3])
        logits = [_upsample_to(head(x), hw) for head in self.head_convs]
        if self.heads == 1:
            return ForwardResult(logits[0], logits[0], [])
        return ForwardResult(logits[0], logits[1], [])


class DualModel:
    """Baseline: one single-task model per task, trained jointly here but with
    fully disjoint parameters (equivalent to separate training)."""

    def __init__(self, config: CrinConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.building = UNetModel(config, seed=seed, heads=1, name="building",
                                  dtype=dtype)
        self.road = UNetModel(config, seed=seed + 1, heads=1, name="road",
                              dtype=dtype)
        self.store = ParamStore()
        for sub in (self.building, self.road):
            for n, t in sub.store.items():
                self.store.register(n, t, learnable=sub.store.is_learnable(n))

    def forward(self, image: Tensor, training: bool = True) -> ForwardResult:
        b = self.building.forward(image, training)
        r = self.road.forward(image, training)
        return ForwardResult(b.building_logits, r.building_logits, [])


def build_variant(kind: str, config: CrinConfig, seed: int = 0, dtype=np.float32):
    """Instantiate one of the ablation variants."""
    if kind == "baseline":
        return DualModel(config, seed=seed, dtype=dtype)
    if kind == "naive_multitask":
        return UNetModel(config, seed=seed, heads=2, dtype=dtype)
    if kind == "mti_only":
        return CrinModel(config, seed=seed, use_csi=False, dtype=dtype)
    if kind == "full_crin":
        return CrinModel(config, seed=seed, use_csi=True, dtype=dtype)
    raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
