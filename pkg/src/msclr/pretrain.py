"""Momentum-contrast pretraining with cross-format positive pairs.

The query encoder sees format ``a`` of a clip, the key encoder (an EMA copy)
sees format ``b`` of the same clip, and the pair is contrasted against a
FIFO memory bank of past keys shared by all formats.
"""

from __future__ import annotations

import base64
import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint, digest
from .conventions import ConventionRegistry, PoseSequence, SkeletonConvention, pad_to_unified
from .dataio.augment import AugmentationConfig, augment
from .dataio.container import SequenceRecord
from .dataio.streams import STREAMS, derive_stream, interpolate_frames
from .graph import adjacency_for
from .network import ContrastiveEncoder, STGCNConfig, adjacency_tensors

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class MissingFormatError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# ---------------------------------------------------------------- loss / bank


def info_nce(q: torch.Tensor, k: torch.Tensor, negatives: torch.Tensor | None,
             temperature: float) -> torch.Tensor:
    """Per-query InfoNCE loss; ``q``/``k`` are ``(B, D)`` or ``(D,)``, negatives ``(N, D)``.

    Computed as ``logsumexp(logits) - logits[0]``, which subtracts the max
    logit and stays finite for any unit inputs.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    single = q.dim() == 1
    q2, k2 = q.reshape(-1, q.shape[-1]), k.reshape(-1, k.shape[-1])
    pos = (q2 * k2).sum(dim=1, keepdim=True)
    if negatives is not None and negatives.shape[0] > 0:
        logits = torch.cat([pos, q2 @ negatives.T], dim=1) / temperature
    else:
        logits = pos / temperature
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return loss[0] if single else loss


class MemoryBank:
    """FIFO queue of unit-norm keys; ``size`` counts filled slots."""

    def __init__(self, capacity: int, dim: int, strict: bool = False, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity, self.dim, self.strict = capacity, dim, strict
        self.queue = torch.zeros(capacity, dim, dtype=dtype)
        self.write_pointer = 0
        self.size = 0

    def keys(self) -> torch.Tensor:
        return self.queue[: self.size]

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "MemoryBank":
        keys = keys.detach().to(self.queue.dtype).reshape(-1, self.dim)
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds bank capacity {self.capacity}")
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            if self.strict:
                raise ValueError("memory bank keys must be unit norm")
            warnings.warn("re-normalizing non-unit keys before enqueue", stacklevel=2)
            keys = keys / norms.clamp_min(1e-12)[:, None]
        idx = (self.write_pointer + torch.arange(b)) % self.capacity
        self.queue[idx] = keys
        self.write_pointer = (self.write_pointer + b) % self.capacity
        self.size = min(self.capacity, self.size + b)
        return self


def enqueue(bank: MemoryBank, keys: torch.Tensor) -> MemoryBank:
    return bank.enqueue(keys)


@dataclass
class MoCoState:
    query: nn.Module
    key: nn.Module
    bank: MemoryBank
    temperature: float = 0.07
    ema_momentum: float = 0.999
    step: int = 0

    @classmethod
    def create(cls, query: nn.Module, bank: MemoryBank, temperature: float = 0.07,
               ema_momentum: float = 0.999) -> "MoCoState":
        key = copy.deepcopy(query)
        for p in key.parameters():
            p.requires_grad_(False)
        return cls(query, key, bank, temperature, ema_momentum)


@torch.no_grad()
def momentum_update(state: MoCoState) -> MoCoState:
    """``key <- m * key + (1 - m) * query`` over all parameters."""
    m = state.ema_momentum
    qp, kp = list(state.query.parameters()), list(state.key.parameters())
    if len(qp) != len(kp) or any(a.shape != b.shape for a, b in zip(qp, kp)):
        raise ValueError("query and key encoders have mismatched parameter shapes")
    for pk, pq in zip(kp, qp):
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    return state


# ---------------------------------------------------------------- views


def format_pairs(formats: Sequence[str]) -> list[tuple[str, str]]:
    """Ordered cross-format pairs; a single format pairs with itself."""
    if len(formats) == 1:
        return [(formats[0], formats[0])]
    return [(a, b) for a in formats for b in formats if a != b]


def iterations_per_epoch(n_records: int, n_pairs: int, batch_size: int) -> int:
    return math.ceil(n_records * n_pairs / batch_size)


def prepare_view(raw: np.ndarray, convention: SkeletonConvention, registry: ConventionRegistry,
                 config: AugmentationConfig, rng: np.random.Generator, stream: str = "joint",
                 frames: int = 50) -> PoseSequence:
    if raw.shape[2] != frames:
        raw = interpolate_frames(raw, frames)
    seq = pad_to_unified(raw, convention.name, registry)
    seq = augment(seq, convention, config, rng)
    return derive_stream(seq, stream, convention)


def make_positive_pair(record: SequenceRecord, formats: tuple[str, str], aug: AugmentationConfig,
                       rng: np.random.Generator, registry: ConventionRegistry,
                       stream: str = "joint", frames: int = 50) -> tuple[PoseSequence, PoseSequence]:
    """Independently augmented query (format a) and key (format b) views."""
    a, b = formats
    for fmt in (a, b):
        if fmt not in record.formats:
            raise MissingFormatError(f"record {record.sample_id!r} has no {fmt!r} data")
    q = prepare_view(record.formats[a], registry[a], registry, aug, rng, stream, frames)
    k = prepare_view(record.formats[b], registry[b], registry, aug, rng, stream, frames)
    return q, k


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = (40,)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    temperature: float = 0.07
    ema_momentum: float = 0.999
    bank_size: int = 8192
    frames: int = 50
    streams: tuple[str, ...] = ("joint",)
    seed: int = 0
    model: STGCNConfig = field(default_factory=STGCNConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "streams", tuple(self.streams))
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.ema_momentum < 1:
            raise ValueError("ema_momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.bank_size < 1:
            raise ValueError("batch_size, epochs and bank_size must be positive")
        for s in self.streams:
            if s not in STREAMS:
                raise ValueError(f"unknown stream {s!r}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)
        return float(f"{lr:.12g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["model"] = STGCNConfig(**d["model"])
        d["augmentation"] = AugmentationConfig(**d["augmentation"])
        return cls(**d)


@dataclass
class PretrainResult:
    """Trained per-stream MoCo states plus everything needed to reload them."""

    config: PretrainConfig
    formats: list[str]
    conventions: dict[str, SkeletonConvention]
    v_max: int
    states: dict[str, MoCoState]
    loss_history: dict[str, list[float]]
    rng_state: dict = field(default_factory=dict)

    @property
    def streams(self) -> list[str]:
        return list(self.states)

    def registry(self) -> ConventionRegistry:
        return ConventionRegistry(list(self.conventions.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for stream, st in self.states.items():
            for role, model in (("query", st.query), ("key", st.key)):
                for name, t in model.state_dict().items():
                    out[f"{stream}/{role}/{name}"] = t.detach().cpu().numpy()
            out[f"{stream}/bank"] = st.bank.queue.cpu().numpy()
        return out

    def header(self) -> dict:
        return {
            "kind": "msclr-pretrain",
            "config": self.config.to_dict(),
            "formats": self.formats,
            "conventions": {k: c.to_dict() for k, c in self.conventions.items()},
            "v_max": self.v_max,
            "streams": {s: {"step": st.step, "bank_pointer": st.bank.write_pointer,
                            "bank_size": st.bank.size} for s, st in self.states.items()},
            "loss_history": self.loss_history,
            "rng_state": self.rng_state,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.header(), self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> "PretrainResult":
        header, arrays = load_checkpoint(path)
        config = PretrainConfig.from_dict(header["config"])
        convs = {k: SkeletonConvention.from_dict(d) for k, d in header["conventions"].items()}
        states = {}
        for stream, meta in header["streams"].items():
            models = {}
            for role in ("query", "key"):
                model = ContrastiveEncoder(config.model, header["v_max"])
                prefix = f"{stream}/{role}/"
                sd = {n[len(prefix):]: torch.from_numpy(a.copy()) for n, a in arrays.items()
                      if n.startswith(prefix)}
                model.load_state_dict(sd)
                models[role] = model
            bank = MemoryBank(config.bank_size, config.model.projection_dim)
            bank.queue = torch.from_numpy(arrays[f"{stream}/bank"].copy())
            bank.write_pointer, bank.size = meta["bank_pointer"], meta["bank_size"]
            st = MoCoState.create(models["query"], bank, config.temperature, config.ema_momentum)
            st.key.load_state_dict(models["key"].state_dict())
            st.step = meta["step"]
            states[stream] = st
        return cls(config, header["formats"], convs, header["v_max"], states,
                   header["loss_history"], header.get("rng_state", {}))

    def checkpoint_id(self) -> str:
        return digest(self.arrays())[:16]


def epoch_batches(n_records: int, pairs: Sequence[tuple[str, str]], batch_size: int,
                  rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """Batches of ``(pair_index, record_index)`` items for one epoch.

    Each pair gets its own shuffled pass over the records; passes are cut into
    ``batch_size`` chunks and interleaved round-robin, then the stream is cut
    into batches. The batch count is ``ceil(records * pairs / batch_size)``.
    """
    chunks = []
    for p in range(len(pairs)):
        order = rng.permutation(n_records)
        chunks.append([[(p, int(r)) for r in order[i:i + batch_size]]
                       for i in range(0, n_records, batch_size)])
    flat = []
    for round_ in range(max(len(c) for c in chunks)):
        for c in chunks:
            if round_ < len(c):
                flat.extend(c[round_])
    return [flat[i:i + batch_size] for i in range(0, len(flat), batch_size)]


def _interpolated(dataset: Sequence[SequenceRecord], formats: Sequence[str], frames: int,
                  ) -> list[SequenceRecord]:
    out = []
    for rec in dataset:
        missing = [f for f in formats if f not in rec.formats]
        if missing:
            raise MissingFormatError(f"record {rec.sample_id!r} lacks formats {missing}")
        arrays = {f: interpolate_frames(rec.formats[f], frames) for f in formats}
        out.append(SequenceRecord(rec.sample_id, arrays, rec.label, rec.split_tag))
    return out


LogFn = Callable[[dict], None]


def pretrain_stream(records: Sequence[SequenceRecord], registry: ConventionRegistry,
                    formats: Sequence[str], config: PretrainConfig, stream: str,
                    seed: int, log_fn: LogFn | None = None) -> tuple[MoCoState, list[float]]:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    v_max = registry.v_max
    query = ContrastiveEncoder(config.model, v_max)
    bank = MemoryBank(config.bank_size, config.model.projection_dim)
    state = MoCoState.create(query, bank, config.temperature, config.ema_momentum)
    opt = torch.optim.SGD(query.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    graphs = {f: adjacency_tensors(adjacency_for(registry[f], v_max)) for f in formats}
    pairs = format_pairs(list(formats))
    n_iter = iterations_per_epoch(len(records), len(pairs), config.batch_size)
    losses: list[float] = []
    query.train()
    state.key.train()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        batches = epoch_batches(len(records), pairs, config.batch_size, rng)
        assert len(batches) == n_iter
        for batch in batches:
            qs, ks = [], []
            for p in sorted({p for p, _ in batch}):
                a, b = pairs[p]
                views = [make_positive_pair(records[r], (a, b), config.augmentation, rng, registry,
                                            stream, config.frames) for pp, r in batch if pp == p]
                xq = torch.from_numpy(np.stack([v[0].data for v in views]))
                xk = torch.from_numpy(np.stack([v[1].data for v in views]))
                qs.append(query(xq, *graphs[a]).projection)
                with torch.no_grad():
                    ks.append(state.key(xk, *graphs[b]).projection)
            q, k = torch.cat(qs), torch.cat(ks)
            negatives = bank.keys()
            loss = info_nce(q, k, negatives, config.temperature).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at stream {stream!r}, epoch {epoch}, step {state.step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            momentum_update(state)
            with torch.no_grad():
                pos_sim = (q * k).sum(dim=1).mean().item()
                top_neg = (q @ negatives.T).max(dim=1).values.mean().item() if len(negatives) else None
            bank.enqueue(k)
            state.step += 1
            losses.append(float(loss.item()))
            if log_fn is not None:
                log_fn({"stream": stream, "epoch": epoch, "step": state.step, "loss": losses[-1],
                        "lr": lr, "pos_sim": pos_sim, "top_neg_sim": top_neg,
                        "iterations_per_epoch": n_iter})
    for p in query.parameters():
        if not torch.all(torch.isfinite(p)):
            raise NonFiniteLossError(f"non-finite parameters after training stream {stream!r}")
    return state, losses


def pretrain_run(dataset: Sequence[SequenceRecord], registry: ConventionRegistry,
                 formats: Sequence[str], config: PretrainConfig,
                 log_fn: LogFn | None = None) -> PretrainResult:
    """Pretrain one MoCo model per configured stream on the given formats."""
    formats = list(formats)
    if not formats:
        raise ValueError("at least one format is required")
    for f in formats:
        registry[f]
    records = _interpolated(dataset, formats, config.frames)
    if not records:
        raise ValueError("empty pretraining dataset")
    states, history = {}, {}
    for i, stream in enumerate(config.streams):
        seed = int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0])
        states[stream], history[stream] = pretrain_stream(
            records, registry, formats, config, stream, seed, log_fn)
    rng_state = {"seed": config.seed,
                 "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}
    convs = {c.name: c for c in registry}
    return PretrainResult(config, formats, convs, registry.v_max, states, history, rng_state)


def schedule(config: PretrainConfig, n_records: int, n_formats: int) -> dict:
    """Dry-run description of the optimization schedule; no training."""
    pairs = 1 if n_formats == 1 else n_formats * (n_formats - 1)
    return {
        "epochs": config.epochs,
        "optimizer": "sgd",
        "momentum": config.momentum,
        "weight_decay": config.weight_decay,
        "lr_initial": config.lr,
        "lr_milestones": list(config.lr_milestones),
        "lr_gamma": config.lr_gamma,
        "lr_by_epoch": [config.lr_at(e) for e in range(config.epochs)],
        "batch_size": config.batch_size,
        "format_pairs_per_record": pairs,
        "iterations_per_epoch": iterations_per_epoch(n_records, pairs, config.batch_size),
        "frames": config.frames,
        "temperature": config.temperature,
        "ema_momentum": config.ema_momentum,
        "bank_size": config.bank_size,
        "embedding_dim": config.model.embedding_dim,
        "projection_dim": config.model.projection_dim,
    }
