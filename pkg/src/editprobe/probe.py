"""Score regression from pooled hidden-state features.

The head is a two-hidden-layer ReLU MLP (d -> 256 -> 64 -> 1) or, for the
ablation, a single linear layer. Targets are standardized on the training
split; predictions are always de-standardized back to the MOS scale. One
independent model is trained per rated dimension. Training uses AdamW with
a warmup-cosine schedule, per-epoch shuffling from the run seed, and keeps
the epoch checkpoint with the best validation SRCC.

End-to-end fine-tuning runs the same loop but draws features from the
backbone at the fixed selected layer, updating adapters and head only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from editprobe import numerics as nm
from editprobe.adapters import AdapterSet
from editprobe.common import ALL_DIMENSIONS, atomic_write_bytes, rng_for, split_of
from editprobe.correlations import srcc
from editprobe.errors import ContractError, DataError
from editprobe.numerics import LrSchedule, OptimizerState, ParamStore, Tensor

MODEL_MAGIC = b"EPPM"
MODEL_VERSION = 1
_DIM_CODES = {d: i for i, d in enumerate(ALL_DIMENSIONS)}
_HEAD_CODES = {"mlp": 0, "linear": 1}

MIN_TRAIN_SAMPLES = 30


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3  # toy-scale default; full-scale runs document 1e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    lr_floor: float = 0.0
    seed: int = 0
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    hidden: tuple[int, int] = (256, 64)
    head: str = "mlp"  # "mlp" | "linear"
    dimension: str = "overall"

    def __post_init__(self):
        if self.head not in _HEAD_CODES:
            raise ContractError(f"head must be one of {list(_HEAD_CODES)}, got {self.head!r}")
        if self.dimension not in ALL_DIMENSIONS:
            raise ContractError(f"unknown dimension {self.dimension!r}")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_srcc: list[float | None] = field(default_factory=list)
    init_loss: float = 0.0
    best_epoch: int = 0
    split_sizes: dict = field(default_factory=dict)
    total_steps: int = 0

    def to_json(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "val_srcc": self.val_srcc,
            "init_loss": self.init_loss,
            "best_epoch": self.best_epoch,
            "split_sizes": self.split_sizes,
            "total_steps": self.total_steps,
        }


class ProbeModel:
    """Trained head plus target standardization and the probing layer index."""

    def __init__(
        self,
        weights: dict[str, np.ndarray],
        target_mean: float,
        target_std: float,
        layer_index: int,
        dimension: str,
        head: str = "mlp",
        adapter_blob: bytes | None = None,
        split_seed: int = 0,
    ):
        self.weights = weights
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)
        self.layer_index = int(layer_index)
        self.dimension = dimension
        self.head = head
        self.adapter_blob = adapter_blob
        self.split_seed = int(split_seed)

    # -- forward ------------------------------------------------------------

    def _forward(self, feats: Tensor) -> nm.Tensor:
        return head_forward(self.weights_as_tensors(), feats, self.head)

    def weights_as_tensors(self) -> dict[str, Tensor]:
        if not hasattr(self, "_tensors"):
            self._tensors = {k: Tensor(v) for k, v in self.weights.items()}
        return self._tensors

    def predict(self, features: np.ndarray) -> np.ndarray:
        """De-standardized predictions on the MOS scale; (d,) or (n, d) input."""
        feats = np.asarray(features, dtype=np.float32)
        single = feats.ndim == 1
        if single:
            feats = feats[None, :]
        out = self._forward(Tensor(feats)).data[:, 0]
        out = out * self.target_std + self.target_mean
        return float(out[0]) if single else out.astype(np.float64)

    # -- serialization ------------------------------------------------------

    def save(self, path: str) -> None:
        names = _weight_names(self.head)
        blob = bytearray()
        flags = 1 if self.adapter_blob is not None else 0
        if self.head == "mlp":
            d, h1 = self.weights["w1"].shape
            h2 = self.weights["w2"].shape[1]
        else:
            d, h1, h2 = self.weights["w"].shape[0], 0, 0
        blob += struct.pack(
            "<4sBBBBIIIIIdd",
            MODEL_MAGIC,
            MODEL_VERSION,
            flags,
            _DIM_CODES[self.dimension],
            _HEAD_CODES[self.head],
            d,
            h1,
            h2,
            self.layer_index,
            self.split_seed & 0xFFFFFFFF,
            self.target_mean,
            self.target_std,
        )
        for name in names:
            blob += self.weights[name].astype("<f4").tobytes()
        if self.adapter_blob is not None:
            blob += struct.pack("<I", len(self.adapter_blob))
            blob += self.adapter_blob
        atomic_write_bytes(path, bytes(blob))

    @classmethod
    def load(cls, path: str) -> "ProbeModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        header = struct.Struct("<4sBBBBIIIIIdd")
        if len(blob) < header.size:
            raise DataError(f"model file too short: {len(blob)} bytes")
        magic, version, flags, dim_code, head_code, d, h1, h2, layer, split_seed, mean, std = header.unpack_from(blob, 0)
        if magic != MODEL_MAGIC:
            raise DataError(f"bad model magic {magic!r}")
        if version != MODEL_VERSION:
            raise DataError(f"unsupported model version {version}")
        head = {v: k for k, v in _HEAD_CODES.items()}[head_code]
        dimension = {v: k for k, v in _DIM_CODES.items()}[dim_code]
        offset = header.size
        weights = {}
        shapes = _weight_shapes(d, (h1, h2), head)
        for name in _weight_names(head):
            shape = shapes[name]
            count = int(np.prod(shape))
            weights[name] = (
                np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
            )
            offset += 4 * count
        adapter_blob = None
        if flags & 1:
            (alen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            adapter_blob = blob[offset : offset + alen]
        return cls(weights, mean, std, layer, dimension, head, adapter_blob, split_seed)

    def adapters(self) -> AdapterSet | None:
        return AdapterSet.deserialize(self.adapter_blob) if self.adapter_blob else None


def _weight_names(head: str) -> list[str]:
    return ["w1", "b1", "w2", "b2", "w3", "b3"] if head == "mlp" else ["w", "b"]


def _weight_shapes(d: int, hidden: tuple[int, int], head: str) -> dict[str, tuple]:
    if head == "linear":
        return {"w": (d, 1), "b": (1,)}
    h1, h2 = hidden
    return {
        "w1": (d, h1),
        "b1": (h1,),
        "w2": (h1, h2),
        "b2": (h2,),
        "w3": (h2, 1),
        "b3": (1,),
    }


def init_head(store: ParamStore, d: int, config: ProbeConfig) -> None:
    rng = rng_for(config.seed, "head-init")
    shapes = _weight_shapes(d, config.hidden, config.head)
    for name, shape in shapes.items():
        if name.startswith("b"):
            store.add(f"head.{name}", np.zeros(shape), trainable=True)
        else:
            store.add(f"head.{name}", rng.normal(0.0, 0.02, size=shape), trainable=True)


def head_forward(weights: dict[str, Tensor], feats: Tensor, head: str) -> nm.Tensor:
    if head == "linear":
        return nm.add(nm.matmul(feats, weights["w"]), weights["b"])
    h = nm.relu(nm.add(nm.matmul(feats, weights["w1"]), weights["b1"]))
    h = nm.relu(nm.add(nm.matmul(h, weights["w2"]), weights["b2"]))
    return nm.add(nm.matmul(h, weights["w3"]), weights["b3"])


def _store_head_tensors(store: ParamStore, head: str) -> dict[str, Tensor]:
    prefix = "head."
    return {n[len(prefix):]: store[n] for n in store.names() if n.startswith(prefix)}


def build_feature(h_s: np.ndarray, h_e: np.ndarray) -> np.ndarray:
    """Sample-level feature: elementwise mean of the two final-position vectors."""
    h_s = np.asarray(h_s)
    h_e = np.asarray(h_e)
    if h_s.shape != h_e.shape or h_s.ndim != 1:
        raise ContractError(f"feature vectors must be equal-length 1-d, got {h_s.shape} and {h_e.shape}")
    if not (np.isfinite(h_s).all() and np.isfinite(h_e).all()):
        raise ContractError("feature vectors must be finite")
    return 0.5 * (h_s + h_e)


def split_indices(ids: list[str], seed: int, fractions) -> dict[str, np.ndarray]:
    labels = [split_of(sid, seed, fractions) for sid in ids]
    return {
        name: np.array([i for i, l in enumerate(labels) if l == name], dtype=np.intp)
        for name in ("train", "val", "test")
    }


@dataclass
class _Batches:
    """Shared training-loop state for frozen and end-to-end training."""

    order: np.ndarray
    batch_size: int

    def __iter__(self):
        for start in range(0, self.order.size, self.batch_size):
            yield self.order[start : start + self.batch_size]


def _canonical_order(ids: list[str]):
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    return [ids[i] for i in order], np.array(order, dtype=np.intp)


def train_probe(
    features: np.ndarray,
    targets: np.ndarray,
    ids: list[str],
    layer_index: int,
    config: ProbeConfig = ProbeConfig(),
) -> tuple[ProbeModel, TrainReport]:
    """Frozen-feature training on a (n, d) feature matrix."""
    features = np.asarray(features, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float64)
    if features.ndim != 2 or targets.shape != (features.shape[0],) or len(ids) != features.shape[0]:
        raise ContractError(
            f"inconsistent inputs: features {features.shape}, targets {targets.shape}, {len(ids)} ids"
        )
    ids, order = _canonical_order(ids)
    features = features[order]
    targets = targets[order]

    def batch_features(indices, training):
        return Tensor(features[indices])

    return _run_training(batch_features, targets, ids, features.shape[1], layer_index, config)


def finetune_probe(
    samples: list,
    targets: np.ndarray,
    ids: list[str],
    backbone,
    adapters: AdapterSet | None,
    layer_index: int,
    config: ProbeConfig = ProbeConfig(),
) -> tuple[ProbeModel, AdapterSet | None, TrainReport]:
    """End-to-end training: per batch one forward pass per sample through the
    adapter-augmented backbone, features taken from the fixed selected layer
    only; gradients reach adapters and head, never the base weights.

    With adapters=None this reduces exactly to frozen-feature training on the
    precomputed features.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(samples) != targets.size or len(ids) != targets.size:
        raise ContractError("samples, targets, and ids must align")
    ids, order = _canonical_order(ids)
    samples = [samples[i] for i in order]
    targets = targets[order]
    d = backbone.config.d

    if adapters is None:
        # frozen backbone: features never change, so precompute once
        feats = np.stack(
            [
                build_feature(hs.h_s(layer_index), hs.h_e(layer_index))
                for hs in (
                    backbone.forward_all_layers(s, up_to_layer=layer_index) for s in samples
                )
            ]
        ).astype(np.float32)

        def batch_features(indices, training):
            return Tensor(feats[indices])

        model, report = _run_training(batch_features, targets, ids, d, layer_index, config)
        return model, None, report

    drop_rng = rng_for(config.seed, "adapter-dropout")

    def batch_features(indices, training):
        rows = []
        for i in indices:
            hs = backbone.forward_all_layers(
                samples[i],
                adapters=adapters,
                training=training,
                rng=drop_rng if training else None,
                grad_layer=layer_index,
                up_to_layer=layer_index,
            )
            h_s, h_e = hs.graph_rows
            rows.append(nm.mul(nm.add(h_s, h_e), 0.5))
        return nm.concat_rows(rows)

    model, report = _run_training(
        batch_features, targets, ids, d, layer_index, config, adapters=adapters
    )
    model.adapter_blob = adapters.serialize()
    return model, adapters, report


def _run_training(
    batch_features,
    targets: np.ndarray,
    ids: list[str],
    d: int,
    layer_index: int,
    config: ProbeConfig,
    adapters: AdapterSet | None = None,
) -> tuple[ProbeModel, TrainReport]:
    splits = split_indices(ids, config.seed, config.fractions)
    train_idx, val_idx = splits["train"], splits["val"]
    if train_idx.size < MIN_TRAIN_SAMPLES:
        raise DataError(f"need >= {MIN_TRAIN_SAMPLES} training samples, got {train_idx.size}")
    y_train = targets[train_idx]
    t_std = float(y_train.std())
    if t_std == 0.0:
        raise DataError("training targets have zero variance")
    t_mean = float(y_train.mean())
    y_std = ((targets - t_mean) / t_std).astype(np.float32)

    store = ParamStore()
    init_head(store, d, config)
    if adapters is not None:
        adapters.register_params(store)
    head_tensors = _store_head_tensors(store, config.head)

    steps_per_epoch = int(np.ceil(train_idx.size / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    warmup = int(round(config.warmup_frac * total_steps))
    schedule = LrSchedule(base=config.lr, warmup=warmup, total=total_steps, floor=config.lr_floor)
    opt = OptimizerState(weight_decay=config.weight_decay)

    def batch_loss(indices, training):
        feats = batch_features(indices, training)
        pred = head_forward(head_tensors, feats, config.head)
        diff = nm.sub(pred, Tensor(y_std[indices][:, None]))
        loss = nm.tmean(nm.mul(diff, diff))
        if training and adapters is not None:
            penalty = adapters.orthogonality_penalty()
            if penalty is not None:
                loss = nm.add(loss, penalty)
        return loss

    def evaluate_split(indices):
        if indices.size < 3:
            return None
        preds = []
        for start in range(0, indices.size, 64):
            chunk = indices[start : start + 64]
            feats = batch_features(chunk, False)
            preds.append(head_forward(head_tensors, feats, config.head).data[:, 0])
        preds = np.concatenate(preds) * t_std + t_mean
        if np.std(preds) == 0 or np.std(targets[indices]) == 0:
            return None
        return srcc(preds, targets[indices])

    report = TrainReport(
        split_sizes={k: int(v.size) for k, v in splits.items()}, total_steps=total_steps
    )
    init_losses = [
        batch_loss(train_idx[s : s + 256], False).item() * min(256, train_idx.size - s)
        for s in range(0, train_idx.size, 256)
    ]
    report.init_loss = float(np.sum(init_losses) / train_idx.size)

    shuffle_rng = rng_for(config.seed, "epoch-shuffle")
    head_names = [n for n in store.names() if n.startswith("head.")]
    snapshot_names = list(store.names())
    best = (-np.inf, 0, store.snapshot(snapshot_names), adapters.serialize() if adapters else None)
    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(train_idx.size)
        epoch_losses = []
        for batch in _Batches(train_idx[perm], config.batch_size):
            loss = batch_loss(batch, True)
            if not np.isfinite(loss.data):
                raise ContractError(f"non-finite loss at step {step}")
            nm.backward(loss, store)
            nm.adamw_step(store, opt, nm.lr_at(schedule, step))
            if adapters is not None:
                adapters.update_importance_and_prune(store.grads, step, total_steps, opt)
            epoch_losses.append(loss.item())
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))
        val = evaluate_split(val_idx)
        report.val_srcc.append(val)
        score = val if val is not None else -np.inf
        if score > best[0]:
            best = (score, epoch, store.snapshot(snapshot_names), adapters.serialize() if adapters else None)

    if best[0] == -np.inf:  # no usable validation signal: keep the final weights
        best = (best[0], config.epochs - 1, store.snapshot(snapshot_names), adapters.serialize() if adapters else None)
    report.best_epoch = best[1]
    store.restore(best[2])
    if adapters is not None and best[3] is not None:
        restored = AdapterSet.deserialize(best[3])
        for name, t in adapters.triplets.items():
            src = restored.triplets[name]
            t.p.data = src.p.data.astype(t.p.data.dtype)
            t.lam.data = src.lam.data.astype(t.lam.data.dtype)
            t.q.data = src.q.data.astype(t.q.data.dtype)
            t.mask = src.mask.copy()
            t.importance = src.importance.copy()

    weights = {n.split(".", 1)[1]: store[n].data.copy() for n in head_names}
    model = ProbeModel(
        weights=weights,
        target_mean=t_mean,
        target_std=t_std,
        layer_index=layer_index,
        dimension=config.dimension,
        head=config.head,
        split_seed=config.seed,
    )
    return model, report
