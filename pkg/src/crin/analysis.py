"""Complexity accounting (parameters, MACs/FLOPs, FPS), the per-channel
scale-contribution study, and feature-space exports."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Sample, normalize_image
from .io import save_pgm
from .nn import CrinConfig, CrinModel, ConvBlock, MTIBlock, ParamStore
from .tensor import Tensor


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

class CostTracker:
    """Collects per-scope MAC and elementwise-op counts during a forward pass."""

    def __init__(self):
        self.macs: dict[str, int] = {}
        self.elems: dict[str, int] = {}

    def add(self, scope: str, macs: int, elems: int) -> None:
        if macs:
            self.macs[scope] = self.macs.get(scope, 0) + macs
        if elems:
            self.elems[scope] = self.elems.get(scope, 0) + elems

    def __enter__(self):
        T._set_cost_tracker(self)
        return self

    def __exit__(self, *exc):
        T._set_cost_tracker(None)
        return False


@dataclass
class CostRow:
    name: str
    params: int
    macs: int
    elem_ops: int

    @property
    def flops(self) -> int:
        # convention: 2 FLOPs per MAC plus one per elementwise output element
        return 2 * self.macs + self.elem_ops


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    input_size: tuple | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,params,macs,flops"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs},{r.flops}")
        lines.append(f"TOTAL,{self.total_params},{self.total_macs},{self.total_flops}")
        return "\n".join(lines) + "\n"


def _param_counts_by_layer(store: ParamStore) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, t in store.learnable_items():
        layer = name.rsplit(".", 1)[0]
        counts[layer] = counts.get(layer, 0) + t.data.size
    return counts


def count_params(model) -> CostReport:
    """Exact learnable-element counts per named layer."""
    counts = _param_counts_by_layer(model.store)
    rows = [CostRow(name, n, 0, 0) for name, n in sorted(counts.items())]
    return CostReport(rows)


def count_flops(model, input_size: tuple[int, int]) -> CostReport:
    """Per-layer MACs/FLOPs for one forward pass on a single image of the
    stated size (eval mode)."""
    h, w = input_size
    x = Tensor(np.zeros((1, model.config.in_channels, h, w), dtype=model.dtype))
    with CostTracker() as tracker:
        model.forward(x, training=False)
    params = _param_counts_by_layer(model.store)
    names = sorted(set(tracker.macs) | set(tracker.elems) | set(params))
    rows = [CostRow(n, params.get(n, 0), tracker.macs.get(n, 0),
                    tracker.elems.get(n, 0)) for n in names]
    return CostReport(rows, input_size=(1, model.config.in_channels, h, w))


def conv_macs(in_ch: int, out_ch: int, kh: int, kw: int, out_h: int, out_w: int,
              groups: int = 1) -> int:
    """MAC model for a single convolution layer."""
    return out_h * out_w * out_ch * (in_ch // groups) * kh * kw


@dataclass
class FpsReport:
    mean_fps: float
    median_fps: float
    std_fps: float
    runs: int


def bench_fps(model, input_size: tuple[int, int], warmup: int = 5,
              runs: int = 20) -> FpsReport:
    """Wall-clock single-image forward passes on frozen weights."""
    if runs <= 0:
        raise ValueError("runs must be positive")
    h, w = input_size
    x = Tensor(np.zeros((1, model.config.in_channels, h, w), dtype=model.dtype))
    for _ in range(warmup):
        model.forward(x, training=False)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.forward(x, training=False)
        times.append(time.perf_counter() - t0)
    fps = 1.0 / np.asarray(times)
    return FpsReport(float(fps.mean()), float(np.median(fps)),
                     float(fps.std()), runs)


# ---------------------------------------------------------------------------
# MTI vs conventional decoder stage cost
# ---------------------------------------------------------------------------

def mti_stage_macs(width: int, hw: tuple[int, int],
                   config: CrinConfig | None = None) -> int:
    """Measured MACs of one MTI decoder stage at the given width/resolution."""
    cfg = config or CrinConfig(stage_widths=(width,) * 4)
    store = ParamStore()
    rng = np.random.default_rng(0)
    block = MTIBlock(store, rng, "probe", width, cfg)
    c = block.c_task
    h, w = hw
    from .nn import StageFeatures
    dec = StageFeatures(*(Tensor(np.zeros((1, c, h, w), dtype=np.float32))
                          for _ in range(3)))
    skip = Tensor(np.zeros((1, width, h, w), dtype=np.float32))
    with CostTracker() as tracker:
        block(dec, skip, training=False)
    return sum(tracker.macs.values())


def conventional_stage_macs(width: int, hw: tuple[int, int],
                            use_norm: bool = True) -> int:
    """Measured MACs of a conventional decoder stage: concat the skip with the
    upsampled decoder feature (both at ``width`` channels), then two 3x3
    convolutions."""
    store = ParamStore()
    rng = np.random.default_rng(0)
    conv0 = ConvBlock(store, rng, "probe.conv0", 2 * width, width, 3,
                      use_norm=use_norm)
    conv1 = ConvBlock(store, rng, "probe.conv1", width, width, 3,
                      use_norm=use_norm)
    h, w = hw
    x = Tensor(np.zeros((1, 2 * width, h, w), dtype=np.float32))
    with CostTracker() as tracker:
        conv1(conv0(x, training=False), training=False)
    return sum(tracker.macs.values())


# ---------------------------------------------------------------------------
# scale contribution
# ---------------------------------------------------------------------------

@dataclass
class ScaleContributionRow:
    stage: int
    resolution: tuple[int, int]
    task_space: str                  # building / shared / road
    fractions: dict[str, float]      # scale label -> fraction of channels


@dataclass
class ScaleContribution:
    rows: list[ScaleContributionRow] = field(default_factory=list)

    def to_csv(self) -> str:
        labels = list(self.rows[0].fractions) if self.rows else []
        lines = ["stage,resolution,task_space," + ",".join(labels)]
        for r in self.rows:
            vals = ",".join(f"{r.fractions[k]:.4f}" for k in labels)
            lines.append(f"{r.stage},{r.resolution[0]}x{r.resolution[1]},"
                         f"{r.task_space},{vals}")
        return "\n".join(lines) + "\n"


def scale_contribution(model: CrinModel, probe_samples: list[Sample],
                       batch_size: int = 4) -> ScaleContribution:
    """Mean attention per channel over the probe set, argmaxed over the scale
    axis and aggregated into per-scale channel fractions split by the
    [f_b | f_s | f_r] layout."""
    if not model.use_csi:
        raise ValueError("scale_contribution requires a model with CSI blocks")
    cfg = model.config
    labels = [str(k) for k in cfg.branch_kernels]
    sums = [None] * len(model.csi_blocks)
    resolutions = [None] * len(model.csi_blocks)
    n_seen = 0
    from .train import assemble_batch
    for i in range(0, len(probe_samples), batch_size):
        chunk = probe_samples[i:i + batch_size]
        x, _, _ = assemble_batch(chunk, dtype=model.dtype)
        res = model.forward(x, training=False)
        for d, block in enumerate(model.csi_blocks):
            attn = block.last_attn  # (N, scales, C)
            agg = attn.sum(axis=0)
            sums[d] = agg if sums[d] is None else sums[d] + agg
            resolutions[d] = tuple(res.aux[d].f_b.shape[2:])
        n_seen += len(chunk)

    result = ScaleContribution()
    widths = model.dec_widths
    for d, mean_attn in enumerate(sums):
        mean_attn = mean_attn / n_seen
        best = mean_attn.argmax(axis=0)  # per channel
        c = cfg.task_channels(widths[d])[0]
        blocks = {"building": best[:c], "shared": best[c:2 * c],
                  "road": best[2 * c:]}
        # stage d output resolution: input H / 2^(num_stages - d)
        for task, sel in blocks.items():
            fracs = {lab: float(np.mean(sel == k)) for k, lab in enumerate(labels)}
            result.rows.append(ScaleContributionRow(
                stage=d, resolution=resolutions[d], task_space=task,
                fractions=fracs))
    return result


# ---------------------------------------------------------------------------
# feature export
# ---------------------------------------------------------------------------

def export_features(model: CrinModel, sample: Sample, out_dir,
                    stages: list[int] | None = None,
                    max_channels: int = 4) -> dict:
    """Write selected channels of each stage's f_b / f_s / f_r blocks as
    min-max normalized PGM rasters plus a JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = Tensor(normalize_image(sample.image)[None].astype(model.dtype))
    res = model.forward(x, training=False)
    index = {"sample": sample.id, "files": []}
    for d, sf in enumerate(res.aux):
        if stages is not None and d not in stages:
            continue
        for task, feat in (("building", sf.f_b), ("shared", sf.f_s),
                           ("road", sf.f_r)):
            arr = feat.data[0]
            for c in range(min(arr.shape[0], max_channels)):
                ch = arr[c]
                lo, hi = float(ch.min()), float(ch.max())
                if hi > lo:
                    gray = ((ch - lo) / (hi - lo) * 255.0).round().astype(np.uint8)
                else:
                    gray = np.zeros(ch.shape, dtype=np.uint8)  # constant map -> 0
                fname = f"stage{d}_{task}_ch{c}.pgm"
                save_pgm(gray, out / fname)
                index["files"].append({"file": fname, "stage": d, "task": task,
                                       "channel": c,
                                       "height": ch.shape[0], "width": ch.shape[1]})
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return index
