"""SGD training loop, evaluation, and checkpoint serialization.

Training is plain minibatch SGD with momentum 0.9 and weight decay, learning
rate stepped down by 10x at fixed epochs.  With a fixed seed and one thread
the whole run is reproducible bit for bit: initialization, shuffling, batch
statistics, and the saved checkpoint.

Checkpoint layout (little-endian): magic "CANC", version u32, 32-byte spec
hash, bundle count u32, then per bundle: name length u32, name bytes,
dim count u32, dims u64 each, float64 values.  Batch-norm running statistics
ride along as state bundles so evaluation reproduces training-time numbers.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, FormatError, NumericError
from .dataset import load_all, train_val_split
from .network import NetParams, NetSpec, init_net, net_forward, spec_hash

CKPT_MAGIC = b"CANC"
CKPT_VERSION = 1


@dataclass
class Hyper:
    seed: int = 7
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (20, 25)
    lr_decay_factor: float = 0.1
    val_fraction: float = 0.2
    bn_momentum: float = 0.1
    dtype: str = "float32"
    stop_at_val: float | None = None  # early exit once val top-1 reaches this


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_top1: float
    val_top1: float
    val_top5: float


@dataclass
class TrainResult:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    best_val_top1: float = 0.0
    best_val_top5: float = 0.0


def _epoch_lr(hyper: Hyper, epoch: int) -> float:
    drops = sum(1 for e in hyper.lr_decay_epochs if epoch >= e)
    return hyper.lr * hyper.lr_decay_factor ** drops


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether the label ranks in the top k; ties broken by class index."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return (order[:, :k] == labels[:, None]).any(axis=1)


def evaluate(spec: NetSpec, params: NetParams, clips: np.ndarray,
             labels: np.ndarray, batch_size: int = 16):
    """Inference-mode top-1/top-5 accuracy plus the confusion matrix."""
    k5 = min(5, spec.classes)
    hits1 = hits5 = 0
    confusion = np.zeros((spec.classes, spec.classes), dtype=np.int64)
    for lo in range(0, len(labels), batch_size):
        x = clips[lo:lo + batch_size]
        y = labels[lo:lo + batch_size]
        logits = net_forward(spec, params, x, training=False)
        hits1 += int(top_k_hits(logits, y, 1).sum())
        hits5 += int(top_k_hits(logits, y, k5).sum())
        preds = np.argmax(logits, axis=1)
        np.add.at(confusion, (y, preds), 1)
    n = len(labels)
    return hits1 / n, hits5 / n, confusion


def _snapshot(params: NetParams) -> dict[str, np.ndarray]:
    arrays = dict(params.bundles())
    arrays.update(dict(params.state_bundles()))
    return {name: arr.copy() for name, arr in arrays.items()}


def _apply_snapshot(params: NetParams, snap: dict[str, np.ndarray]) -> None:
    for name, arr in list(params.bundles()) + list(params.state_bundles()):
        arr[:] = snap[name]


def train(spec: NetSpec, dataset_path, hyper: Hyper,
          checkpoint_path=None) -> tuple[TrainResult, NetParams]:
    """Train on the given dataset file; returns the log and the best weights."""
    header, labels, clips = load_all(dataset_path)
    if header.classes != spec.classes:
        raise ConfigError(f"dataset has {header.classes} classes, "
                          f"spec {spec.name!r} expects {spec.classes}")
    if spec.stem.in_channels != 1:
        raise ConfigError(f"spec {spec.name!r} expects "
                          f"{spec.stem.in_channels}-channel input; clips are grayscale")
    dtype = np.dtype(hyper.dtype)
    clips = clips.astype(dtype)
    train_idx, val_idx = train_val_split(header.clip_count, hyper.val_fraction)

    rng = np.random.default_rng(hyper.seed)
    params = init_net(spec, rng, dtype)
    velocity = {name: np.zeros_like(arr) for name, arr in params.bundles()}

    result = TrainResult()
    best = _snapshot(params)
    for epoch in range(1, hyper.epochs + 1):
        lr = _epoch_lr(hyper, epoch)
        perm = train_idx[rng.permutation(len(train_idx))]
        loss_sum = 0.0
        hit_sum = 0
        for step, lo in enumerate(range(0, len(perm), hyper.batch_size)):
            idx = perm[lo:lo + hyper.batch_size]
            x = clips[idx]
            y = labels[idx]
            bn_sink: list = []
            with ag.GradTape() as tape:
                logits = net_forward(spec, params, x, training=True, bn_sink=bn_sink)
                loss = ag.cross_entropy(logits, y)
            if not math.isfinite(float(loss)):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            tape.backward(loss)
            for name, arr in params.bundles():
                g = tape.grad(arr) + hyper.weight_decay * arr
                v = velocity[name]
                v *= hyper.momentum
                v += g
                arr -= lr * v
            m = hyper.bn_momentum
            for unit, stats in bn_sink:
                unit.running_mean *= 1.0 - m
                unit.running_mean += m * stats["mean"]
                unit.running_var *= 1.0 - m
                unit.running_var += m * stats["var"]
            loss_sum += float(loss) * len(idx)
            hit_sum += int(top_k_hits(logits, y, 1).sum())

        val_top1, val_top5, _ = evaluate(spec, params, clips[val_idx],
                                         labels[val_idx], hyper.batch_size)
        row = EpochRow(epoch, loss_sum / len(perm), hit_sum / len(perm),
                       val_top1, val_top5)
        result.rows.append(row)
        if val_top1 > result.best_val_top1 or result.best_epoch == 0:
            result.best_epoch = epoch
            result.best_val_top1 = val_top1
            result.best_val_top5 = val_top5
            best = _snapshot(params)
        if hyper.stop_at_val is not None and result.best_val_top1 >= hyper.stop_at_val:
            break

    _apply_snapshot(params, best)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, spec, params)
    return result, params


def write_metrics(path, rows: list[EpochRow]) -> None:
    """One tab-separated line per epoch: epoch, train_loss, train_top1, val_top1, val_top5."""
    with open(path, "w") as fh:
        for r in rows:
            fh.write(f"{r.epoch}\t{r.train_loss:.6f}\t{r.train_top1:.6f}"
                     f"\t{r.val_top1:.6f}\t{r.val_top5:.6f}\n")


def read_metrics(path) -> list[EpochRow]:
    rows = []
    with open(path) as fh:
        for line in fh:
            e, tl, tt, vt, v5 = line.rstrip("\n").split("\t")
            rows.append(EpochRow(int(e), float(tl), float(tt), float(vt), float(v5)))
    return rows


# --------------------------------------------------------------------------
# Checkpoints.
# --------------------------------------------------------------------------

def save_checkpoint(path, spec: NetSpec, params: NetParams) -> None:
    bundles = list(params.bundles()) + list(params.state_bundles())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(spec_hash(spec))
        fh.write(struct.pack("<I", len(bundles)))
        for name, arr in bundles:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Read (spec hash, bundle arrays); raises FormatError with byte offsets."""
    with open(path, "rb") as fh:
        data = fh.read()

    def need(n, offset, what):
        if offset + n > len(data):
            raise FormatError(f"truncated checkpoint at offset {offset}: "
                              f"need {n} bytes for {what}")
        return offset + n

    pos = need(4, 0, "magic")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r} at offset 0")
    end = need(4, pos, "version")
    (version,) = struct.unpack_from("<I", data, pos)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset {pos}")
    pos = end
    end = need(32, pos, "spec hash")
    stored_hash = data[pos:end]
    pos = end
    end = need(4, pos, "bundle count")
    (count,) = struct.unpack_from("<I", data, pos)
    pos = end
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        end = need(4, pos, "name length")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos = end
        end = need(name_len, pos, "name")
        name = data[pos:end].decode()
        pos = end
        end = need(4, pos, "dim count")
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos = end
        end = need(8 * ndim, pos, "dims")
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos = end
        nbytes = 8 * int(np.prod(dims)) if ndim else 8
        end = need(nbytes, pos, f"values of {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                     offset=pos).reshape(dims).copy()
        pos = end
    return stored_hash, arrays


def restore_params(spec: NetSpec, path, dtype=np.float32) -> NetParams:
    """Rebuild NetParams for ``spec`` from a checkpoint, validating the hash."""
    stored_hash, arrays = load_checkpoint(path)
    if stored_hash != spec_hash(spec):
        raise ConfigError(f"checkpoint was written for a different spec "
                          f"(hash mismatch against {spec.name!r})")
    params = init_net(spec, np.random.default_rng(0), np.dtype(dtype))
    expected = list(params.bundles()) + list(params.state_bundles())
    for name, arr in expected:
        if name not in arrays:
            raise FormatError(f"checkpoint is missing bundle {name!r}")
        if arrays[name].shape != arr.shape:
            raise FormatError(f"bundle {name!r} has shape {arrays[name].shape}, "
                              f"expected {arr.shape}")
        arr[:] = arrays[name].astype(arr.dtype)
    extra = set(arrays) - {name for name, _ in expected}
    if extra:
        raise FormatError(f"checkpoint has unexpected bundles: {sorted(extra)}")
    return params
