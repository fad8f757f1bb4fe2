"""Low-rank adaptation of backbone projection matrices in SVD form:
delta_W = P diag(lambda) Q, applied as a scaled residual branch with dropout
on the branch input. Rank components carry an EMA sensitivity score
|lambda * d(loss)/d(lambda)|; during the budget window, the globally
least-important active components are masked so the average active rank
decays linearly to the target. Masked components are zeroed and frozen.

Base weights never train; only P, lambda, Q (plus whatever head the caller
registers) receive updates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from editprobe import numerics as nm
from editprobe.errors import ConfigError, ContractError
from editprobe.numerics import OptimizerState, ParamStore, Tensor

ATTENTION_PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 16
    scaling: float = 32.0
    dropout: float = 0.05
    targets: str | tuple[str, ...] = "both"  # "both" | "llm" | "vision" | explicit names
    importance_decay: float = 0.85
    prune_interval: int = 50
    budget_start_frac: float = 0.2
    budget_end_frac: float = 0.8
    target_rank: int | None = None  # defaults to min(8, rank)
    ortho_weight: float = 0.1
    plain_lora: bool = False  # plain low-rank: no pruning, no orthogonality penalty
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.target_rank is None:
            object.__setattr__(self, "target_rank", min(8, self.rank))
        if not 0 < self.target_rank <= self.rank:
            raise ConfigError(f"target rank {self.target_rank} outside 1..{self.rank}")

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        doc["targets"] = list(self.targets) if not isinstance(self.targets, str) else self.targets
        return doc


@dataclass
class AdapterTriplet:
    p: Tensor  # (out, r)
    lam: Tensor  # (r,)
    q: Tensor  # (r, in)
    mask: np.ndarray  # (r,) bool, False = pruned
    importance: np.ndarray  # (r,) EMA of |lam * grad|
    scaling: float

    @property
    def rank(self) -> int:
        return int(self.lam.data.shape[0])

    @property
    def active(self) -> int:
        return int(self.mask.sum())

    def delta_weight(self) -> np.ndarray:
        lam = self.lam.data * self.mask
        return (self.p.data * lam[None, :]) @ self.q.data


def resolve_targets(store: ParamStore, targets) -> list[str]:
    """Expand a tower selector or explicit name list into projection names."""
    valid = [
        name
        for name in store.names()
        if ".attn.w" in name and name.rsplit(".", 1)[1] in ATTENTION_PROJECTIONS
    ]
    if targets == "both":
        return valid
    if targets == "llm":
        return [n for n in valid if n.startswith("lm.")]
    if targets == "vision":
        return [n for n in valid if n.startswith("enc.")]
    if isinstance(targets, str):
        raise ConfigError(f"unknown target selector {targets!r}; use both/llm/vision or a name list")
    unknown = [t for t in targets if t not in valid]
    if unknown:
        raise ConfigError(f"unknown adapter targets {unknown}; valid targets: {valid}")
    return list(targets)


class AdapterSet:
    def __init__(self, config: AdapterConfig, triplets: dict[str, AdapterTriplet]):
        self.config = config
        self.triplets = triplets

    # -- construction -------------------------------------------------------

    @classmethod
    def attach(cls, backbone, config: AdapterConfig) -> "AdapterSet":
        """Create zero-initialized triplets on the backbone's projections and
        freeze every base parameter."""
        names = resolve_targets(backbone.store, config.targets)
        if not names:
            raise ConfigError("adapter target list is empty")
        rng = np.random.default_rng(config.seed)
        scaling = config.scaling / config.rank
        triplets: dict[str, AdapterTriplet] = {}
        for name in names:
            w = backbone.store[name].data
            in_dim, out_dim = w.shape  # stored as (in, out); applied as x @ W
            dt = w.dtype
            triplets[name] = AdapterTriplet(
                p=Tensor(rng.normal(0.0, config.init_std, size=(out_dim, config.rank)).astype(dt), requires_grad=True),
                lam=Tensor(np.zeros(config.rank, dtype=dt), requires_grad=True),
                q=Tensor(rng.normal(0.0, config.init_std, size=(config.rank, in_dim)).astype(dt), requires_grad=True),
                mask=np.ones(config.rank, dtype=bool),
                importance=np.zeros(config.rank, dtype=np.float64),
                scaling=scaling,
            )
        backbone.freeze_all()
        return cls(config, triplets)

    def register_params(self, store: ParamStore) -> None:
        for name, t in sorted(self.triplets.items()):
            store.adopt(f"adapter.{name}.P", t.p, trainable=True)
            store.adopt(f"adapter.{name}.lam", t.lam, trainable=True)
            store.adopt(f"adapter.{name}.Q", t.q, trainable=True)

    def parameter_count(self) -> int:
        return sum(t.p.data.size + t.lam.data.size + t.q.data.size for t in self.triplets.values())

    # -- forward ------------------------------------------------------------

    def maybe_add_branch(self, base_out, x, name: str, training: bool, rng) -> nm.Tensor:
        t = self.triplets.get(name)
        if t is None:
            return base_out
        branch_in = nm.dropout(x, self.config.dropout, rng, training)
        lam_masked = nm.mul(t.lam, Tensor(t.mask.astype(t.lam.data.dtype)))
        low = nm.mul(nm.matmul(branch_in, nm.transpose(t.q, (1, 0))), lam_masked)
        branch = nm.mul(nm.matmul(low, nm.transpose(t.p, (1, 0))), t.scaling)
        return nm.add(base_out, branch)

    def orthogonality_penalty(self) -> nm.Tensor | None:
        """ortho_weight * sum(|P^T P - I|_F^2 + |Q Q^T - I|_F^2) over triplets."""
        if self.config.plain_lora or self.config.ortho_weight <= 0:
            return None
        total = None
        for name, t in sorted(self.triplets.items()):
            eye = Tensor(np.eye(t.rank, dtype=t.p.data.dtype))
            ptp = nm.sub(nm.matmul(nm.transpose(t.p, (1, 0)), t.p), eye)
            qqt = nm.sub(nm.matmul(t.q, nm.transpose(t.q, (1, 0))), eye)
            term = nm.add(nm.tsum(nm.mul(ptp, ptp)), nm.tsum(nm.mul(qqt, qqt)))
            total = term if total is None else nm.add(total, term)
        return nm.mul(total, self.config.ortho_weight)

    # -- budget -------------------------------------------------------------

    def active_total(self) -> int:
        return sum(t.active for t in self.triplets.values())

    def average_active_rank(self) -> float:
        return self.active_total() / len(self.triplets)

    def _budget_total(self, step: int, start: int, end: int) -> int:
        frac = min(max((step - start) / (end - start), 0.0), 1.0)
        avg = self.config.rank - frac * (self.config.rank - self.config.target_rank)
        return int(round(avg * len(self.triplets)))

    def update_importance_and_prune(
        self,
        grads: dict[str, np.ndarray],
        step: int,
        total_steps: int,
        opt_state: OptimizerState | None = None,
    ) -> list[tuple[str, int]]:
        """EMA importance update from this step's lambda gradients, then mask
        the globally least important active components when the schedule says so.
        Returns the (target, component) pairs masked this call."""
        decay = self.config.importance_decay
        for name, t in self.triplets.items():
            g = grads.get(f"adapter.{name}.lam")
            if g is None:
                raise ContractError(f"missing lambda gradient for adapter {name!r}")
            sensitivity = np.abs(t.lam.data.astype(np.float64) * g.astype(np.float64))
            t.importance = decay * t.importance + (1.0 - decay) * sensitivity

        if self.config.plain_lora:
            return []
        start = int(round(self.config.budget_start_frac * total_steps))
        end = int(round(self.config.budget_end_frac * total_steps))
        if end <= start:
            raise ConfigError(f"budget schedule end {end} <= start {start}")
        if step < start:
            return []
        due = (step - start) % self.config.prune_interval == 0 or step >= end
        if not due:
            return []

        target_total = self._budget_total(step, start, end)
        excess = self.active_total() - target_total
        if excess <= 0:
            return []
        candidates = [
            (t.importance[k], name, k)
            for name, t in sorted(self.triplets.items())
            for k in range(t.rank)
            if t.mask[k]
        ]
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        masked = []
        for _, name, k in candidates[:excess]:
            t = self.triplets[name]
            t.mask[k] = False
            t.lam.data[k] = 0.0
            if opt_state is not None:
                lam_name = f"adapter.{name}.lam"
                if lam_name in opt_state.m:
                    opt_state.m[lam_name][k] = 0.0
                    opt_state.v[lam_name][k] = 0.0
            masked.append((name, k))
        return masked

    # -- serialization ------------------------------------------------------

    def serialize(self) -> bytes:
        config_blob = json.dumps(self.config.to_json(), sort_keys=True).encode("utf-8")
        out = bytearray()
        out += struct.pack("<I", len(config_blob))
        out += config_blob
        out += struct.pack("<I", len(self.triplets))
        for name, t in sorted(self.triplets.items()):
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw))
            out += raw
            out_dim, r = t.p.data.shape
            in_dim = t.q.data.shape[1]
            out += struct.pack("<IIIf", out_dim, in_dim, r, t.scaling)
            out += t.mask.astype(np.uint8).tobytes()
            out += t.importance.astype("<f4").tobytes()
            out += t.p.data.astype("<f4").tobytes()
            out += t.lam.data.astype("<f4").tobytes()
            out += t.q.data.astype("<f4").tobytes()
        return bytes(out)

    @classmethod
    def deserialize(cls, blob: bytes) -> "AdapterSet":
        offset = 0
        (config_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        config_doc = json.loads(blob[offset : offset + config_len].decode("utf-8"))
        offset += config_len
        targets = config_doc.pop("targets")
        config = AdapterConfig(
            targets=targets if isinstance(targets, str) else tuple(targets), **config_doc
        )
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        triplets: dict[str, AdapterTriplet] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            out_dim, in_dim, r, scaling = struct.unpack_from("<IIIf", blob, offset)
            offset += 16
            mask = np.frombuffer(blob, dtype=np.uint8, count=r, offset=offset).astype(bool)
            offset += r
            importance = np.frombuffer(blob, dtype="<f4", count=r, offset=offset).astype(np.float64)
            offset += 4 * r
            p = np.frombuffer(blob, dtype="<f4", count=out_dim * r, offset=offset).reshape(out_dim, r)
            offset += 4 * out_dim * r
            lam = np.frombuffer(blob, dtype="<f4", count=r, offset=offset).copy()
            offset += 4 * r
            q = np.frombuffer(blob, dtype="<f4", count=r * in_dim, offset=offset).reshape(r, in_dim)
            offset += 4 * r * in_dim
            triplets[name] = AdapterTriplet(
                p=Tensor(p.copy(), requires_grad=True),
                lam=Tensor(lam, requires_grad=True),
                q=Tensor(q.copy(), requires_grad=True),
                mask=mask.copy(),
                importance=importance.copy(),
                scaling=scaling,
            )
        return cls(config, triplets)
