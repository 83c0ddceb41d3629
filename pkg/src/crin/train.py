"""AdamW optimization, poly learning-rate schedule, deterministic training
loop, and checkpointing.

Determinism contract: (seed, config, data) fixes the whole trajectory.  Batch
selection and augmentation draw from generators re-seeded per iteration from
(seed, iteration), so resuming from a checkpoint replays the identical
remainder of the run.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import losses
from .autograd import Tape, backward_named
from .data import Sample, normalize_image
from .io import RasterError, rten_decode, rten_encode
from .metrics import ConfusionCounts, MetricValues, confusion_update, metrics_compute
from .tensor import Tensor


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    poly_power: float = 0.9
    max_iters: int = 2000
    batch_size: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.max_iters <= 0:
            raise ValueError("max_iters must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"NaN loss at iteration {iteration}; aborting "
                         f"(last good checkpoint retained)")
        self.iteration = iteration


def poly_lr(iteration: int, config: TrainConfig) -> float:
    """lr = base_lr * (1 - iter / max_iters) ** power, clamped at 0."""
    frac = max(1.0 - iteration / config.max_iters, 0.0)
    return config.base_lr * frac ** config.poly_power


class AdamW:
    """Bias-corrected Adam with decoupled weight decay applied separately from
    the gradient step."""

    def __init__(self, store, config: TrainConfig):
        self.store = store
        self.config = config
        self.step_count = 0
        for name, t in store.learnable_items():
            store.slots.setdefault(name, {
                "m": np.zeros_like(t.data),
                "v": np.zeros_like(t.data),
            })

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.store.learnable_items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            slot = self.store.slots[name]
            slot["m"] = cfg.beta1 * slot["m"] + (1 - cfg.beta1) * g
            slot["v"] = cfg.beta2 * slot["v"] + (1 - cfg.beta2) * (g * g)
            m_hat = slot["m"] / bc1
            v_hat = slot["v"] / bc2
            update = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            if cfg.weight_decay:
                p.data[...] = p.data - lr * cfg.weight_decay * p.data
            p.data[...] = p.data - update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CRCK"


def config_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def checkpoint_save(path, store, optimizer: AdamW, iteration: int,
                    fingerprint: str) -> None:
    """Container: magic, version, JSON metadata block, then named RTEN blobs
    in metadata order."""
    names = [n for n, _ in store.items()]
    slot_names = []
    blobs = []
    for n in names:
        blobs.append(rten_encode(store[n].data))
    for n, _ in store.learnable_items():
        for key in ("m", "v"):
            slot_names.append(f"{n}#{key}")
            blobs.append(rten_encode(store.slots[n][key]))
    meta = {
        "iteration": iteration,
        "step_count": optimizer.step_count,
        "fingerprint": fingerprint,
        "tensors": names,
        "slots": slot_names,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<IQ", 1, len(meta_bytes)))
        f.write(meta_bytes)
        for b in blobs:
            f.write(b)


def checkpoint_read(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise RasterError(f"{path}: bad checkpoint magic at byte 0")
    version, meta_len = struct.unpack_from("<IQ", data, 4)
    if version != 1:
        raise RasterError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    try:
        meta = json.loads(data[pos:pos + meta_len])
    except json.JSONDecodeError as e:
        raise RasterError(f"{path}: corrupt metadata block at byte {pos}: {e}") from e
    pos += meta_len
    tensors, slots = {}, {}
    for name in meta["tensors"]:
        arr, pos = rten_decode(data, pos, path)
        tensors[name] = arr
    for name in meta["slots"]:
        arr, pos = rten_decode(data, pos, path)
        slots[name] = arr
    if pos != len(data):
        raise RasterError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return meta, tensors, slots


def checkpoint_load(path, store, optimizer: AdamW, fingerprint: str,
                    allow_fingerprint_mismatch: bool = False) -> int:
    """Restore parameters and optimizer state; returns the stored iteration."""
    meta, tensors, slots = checkpoint_read(path)
    if meta["fingerprint"] != fingerprint and not allow_fingerprint_mismatch:
        raise RasterError(
            f"{path}: config fingerprint {meta['fingerprint']} does not match "
            f"current config {fingerprint} (pass the override flag to force)")
    store.load_arrays(tensors)
    for key, arr in slots.items():
        name, slot_key = key.rsplit("#", 1)
        self_slot = store.slots.setdefault(name, {})
        self_slot[slot_key] = arr.astype(store[name].data.dtype)
    optimizer.step_count = meta["step_count"]
    return int(meta["iteration"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    lr: float
    l_building: float
    l_road: float
    l_aux: float
    l_total: float

    def csv(self) -> str:
        return (f"{self.iteration},{self.lr:.10e},{self.l_building:.9e},"
                f"{self.l_road:.9e},{self.l_aux:.9e},{self.l_total:.9e}")


LOG_HEADER = "iter,lr,l_building,l_road,l_aux,l_total"


def assemble_batch(samples: list[Sample], dtype=np.float32):
    x = np.stack([normalize_image(s.image) for s in samples]).astype(dtype)
    yb = np.stack([s.building_mask for s in samples]).astype(dtype)
    yr = np.stack([s.road_mask for s in samples]).astype(dtype)
    return Tensor(x), Tensor(yb), Tensor(yr)


def evaluate(model, samples: list[Sample], batch_size: int = 4,
             threshold: float = 0.5) -> dict[str, MetricValues]:
    """Micro-aggregated metrics over a sample list, eval mode."""
    from .tensor import sigmoid
    counts = {"building": ConfusionCounts(), "road": ConfusionCounts()}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, yb, yr = assemble_batch(chunk, dtype=model.dtype)
        out = model.forward(x, training=False)
        pb = sigmoid(out.building_logits).data
        pr = sigmoid(out.road_logits).data
        confusion_update(counts["building"], pb, yb.data, threshold)
        confusion_update(counts["road"], pr, yr.data, threshold)
    return {task: metrics_compute(c) for task, c in counts.items()}


def train(model, train_samples: list[Sample], val_samples: list[Sample],
          config: TrainConfig, out_dir, fingerprint: str = "",
          resume: str | None = None, augment_data: bool = True,
          progress=None) -> list[LogRow]:
    """Run the training loop; writes train_log.csv, val_metrics.csv, and
    periodic checkpoints under ``out_dir``.  Returns the per-iteration log."""
    from .data import augment as augment_fn

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    optimizer = AdamW(model.store, config)
    start = 0
    if resume is not None:
        start = checkpoint_load(resume, model.store, optimizer, fingerprint)

    params = dict(model.store.learnable_items())
    aux_heads = getattr(model, "aux_heads", [])
    log_rows: list[LogRow] = []
    log_path = out / "train_log.csv"
    mode = "a" if start else "w"
    with open(log_path, mode) as log_f, \
            open(out / "val_metrics.csv", mode) as val_f:
        if not start:
            log_f.write(LOG_HEADER + "\n")
            val_f.write("iter,task,iou,precision,recall,f1\n")
        for it in range(start, config.max_iters):
            lr = poly_lr(it, config)
            rng = np.random.default_rng(
                np.random.SeedSequence([0x7A, config.seed, it]))
            idx = rng.integers(0, len(train_samples), size=config.batch_size)
            batch = []
            for j, i in enumerate(idx):
                s = train_samples[int(i)]
                if augment_data:
                    s = augment_fn(s, seed=int(rng.integers(0, 2 ** 31)))
                batch.append(s)
            x, yb, yr = assemble_batch(batch, dtype=model.dtype)
            with Tape() as tape:
                res = model.forward(x, training=True)
                loss, parts = losses.total_loss(
                    res.building_logits, res.road_logits, res.aux, aux_heads,
                    yb, yr)
            if not np.isfinite(parts.l_total):
                raise TrainingDiverged(it)
            grads = backward_named(loss, tape, params)
            optimizer.step(grads, lr)

            row = LogRow(it, lr, parts.l_building, parts.l_road, parts.l_aux,
                         parts.l_total)
            log_rows.append(row)
            log_f.write(row.csv() + "\n")
            if progress and (it % progress == 0 or it == config.max_iters - 1):
                print(f"iter {it:>6}  lr {lr:.3e}  loss {parts.l_total:.4f}",
                      flush=True)

            done = it + 1
            if val_samples and (done % config.eval_interval == 0
                                or done == config.max_iters):
                for task, m in evaluate(model, val_samples,
                                        batch_size=config.batch_size).items():
                    val_f.write(f"{done},{task},{100 * m.iou:.2f},"
                                f"{100 * m.precision:.2f},{100 * m.recall:.2f},"
                                f"{100 * m.f1:.2f}\n")
                val_f.flush()
            if done % config.checkpoint_interval == 0 or done == config.max_iters:
                checkpoint_save(out / f"checkpoint_{done:06d}.ckpt", model.store,
                                optimizer, done, fingerprint)
                checkpoint_save(out / "checkpoint_latest.ckpt", model.store,
                                optimizer, done, fingerprint)
    return log_rows
