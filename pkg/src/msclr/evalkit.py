"""Linear evaluation, stream fusion, format ensembling and reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conventions import ConventionRegistry, pad_to_unified
from .dataio.container import SequenceRecord
from .dataio.streams import derive_stream, interpolate_frames
from .graph import adjacency_for
from .network import ContrastiveEncoder, adjacency_tensors, linear_classify
from .pretrain import PretrainResult

FUSION_WEIGHTS = {"joint": 0.6, "motion": 0.6, "bone": 0.4}
FORMATS_FIRST, STREAMS_FIRST = "formats_first", "streams_first"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class LinearSchedule:
    epochs: int = 100
    lr: float = 3.0
    lr_milestones: tuple[int, ...] = (80,)
    lr_gamma: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        lr = self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)
        return float(f"{lr:.12g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


PAPER_LINEAR = LinearSchedule()
DESK_LINEAR = LinearSchedule(epochs=20, lr=0.1, lr_milestones=(16,), batch_size=16)


# ---------------------------------------------------------------- embeddings / heads


@torch.no_grad()
def extract_embeddings(model: ContrastiveEncoder, records: Sequence[SequenceRecord], fmt: str,
                       stream: str, registry: ConventionRegistry, frames: int = 50,
                       batch_size: int = 64) -> np.ndarray:
    """Frozen-encoder embeddings ``(N, embedding_dim)`` in eval mode, no augmentation."""
    conv = registry[fmt]
    a, mask = adjacency_tensors(adjacency_for(conv, registry.v_max))
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(records), batch_size):
            views = []
            for rec in records[i:i + batch_size]:
                if fmt not in rec.formats:
                    raise EvalError(f"record {rec.sample_id!r} has no {fmt!r} data")
                seq = pad_to_unified(interpolate_frames(rec.formats[fmt], frames), fmt, registry)
                views.append(derive_stream(seq, stream, conv).data)
            x = torch.from_numpy(np.stack(views))
            out.append(model.encoder(x, a, mask).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def fit_linear(features: np.ndarray, labels: np.ndarray, n_classes: int,
               schedule: LinearSchedule) -> nn.Linear:
    """SGD on a single affine layer over fixed features."""
    if len(features) == 0:
        raise EvalError("empty training split")
    gen = torch.Generator().manual_seed(schedule.seed)
    head = nn.Linear(features.shape[1], n_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    opt = torch.optim.SGD(head.parameters(), lr=schedule.lr, momentum=schedule.momentum,
                          weight_decay=schedule.weight_decay)
    for epoch in range(schedule.epochs):
        for g in opt.param_groups:
            g["lr"] = schedule.lr_at(epoch)
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            loss = F.cross_entropy(linear_classify(x[idx], head), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return head


@dataclass
class LinearHead:
    stream: str
    format: str
    head: nn.Linear
    n_classes: int

    def scores(self, features: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = linear_classify(torch.as_tensor(features, dtype=torch.float32), self.head)
            return torch.softmax(logits.double(), dim=1).numpy()


def train_linear(checkpoint: PretrainResult, records: Sequence[SequenceRecord], fmt: str,
                 stream: str, schedule: LinearSchedule = PAPER_LINEAR,
                 n_classes: int | None = None) -> LinearHead:
    """Fit a linear head on frozen query-encoder embeddings of ``fmt``/``stream``."""
    if fmt not in checkpoint.formats:
        raise EvalError(f"checkpoint was not pretrained on {fmt!r} (has {checkpoint.formats})")
    if stream not in checkpoint.states:
        raise EvalError(f"checkpoint has no {stream!r} stream (has {checkpoint.streams})")
    if not records:
        raise EvalError("empty training split")
    labels = np.array([r.label for r in records])
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    model = checkpoint.states[stream].query
    feats = extract_embeddings(model, records, fmt, stream, checkpoint.registry(),
                               checkpoint.config.frames)
    return LinearHead(stream, fmt, fit_linear(feats, labels, n_classes, schedule), n_classes)


# ---------------------------------------------------------------- score combination


def fuse_streams(scores: Mapping[str, np.ndarray] | Sequence[np.ndarray],
                 weights: Mapping[str, float] | Sequence[float] | None = None) -> np.ndarray:
    """Weighted sum of per-stream score arrays.

    ``scores`` is a mapping keyed by stream name (weights looked up by name,
    default joint/motion/bone = 0.6/0.6/0.4) or a ``[joint, motion, bone]``
    sequence paired positionally with ``weights``.
    """
    if isinstance(scores, Mapping):
        names = list(scores)
        w = weights if isinstance(weights, Mapping) else FUSION_WEIGHTS
        if not isinstance(weights, Mapping) and weights is not None:
            w = dict(zip(names, weights))
        arrays = [np.asarray(scores[n], dtype=np.float64) for n in names]
        ws = [float(w[n]) for n in names]
    else:
        arrays = [np.asarray(s, dtype=np.float64) for s in scores]
        ws = list(weights) if weights is not None else [FUSION_WEIGHTS[s] for s in ("joint", "motion", "bone")]
        if len(ws) != len(arrays):
            raise EvalError(f"{len(arrays)} score sets but {len(ws)} weights")
    if not arrays:
        raise EvalError("no score sets to fuse")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise EvalError(f"score shapes differ: {[a.shape for a in arrays]}")
    fused = np.zeros(shape)
    for wt, arr in zip(ws, arrays):
        fused += wt * arr
    return fused


def ensemble_formats(score_sets: Sequence[np.ndarray], atol: float = 1e-6) -> np.ndarray:
    """Mean of row-stochastic per-format score arrays."""
    if not score_sets:
        raise EvalError("no score sets to ensemble")
    arrays = [np.asarray(s, dtype=np.float64) for s in score_sets]
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise EvalError(f"score shapes differ: {a.shape} vs {shape}")
        if np.any(a < 0) or not np.allclose(a.sum(axis=-1), 1.0, atol=atol, rtol=0):
            raise EvalError("ensemble inputs must be softmax scores (non-negative rows summing to 1)")
    return np.mean(arrays, axis=0)


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    return np.argmax(scores, axis=-1)


# ---------------------------------------------------------------- reports


@dataclass
class Entry:
    confusion: np.ndarray  # (true class, predicted class) counts

    @classmethod
    def from_predictions(cls, labels: np.ndarray, preds: np.ndarray, n_classes: int) -> "Entry":
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(conf)

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def per_class(self) -> np.ndarray:
        sup = self.support
        diag = np.diag(self.confusion).astype(np.float64)
        return np.divide(diag, sup, out=np.zeros_like(diag), where=sup > 0)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                "per_class": self.per_class.tolist(), "support": self.support.tolist(),
                "confusion": self.confusion.tolist()}


@dataclass
class EvalReport:
    n_classes: int
    entries: dict[str, Entry]
    protocol: dict = field(default_factory=dict)

    @property
    def headline(self) -> str:
        for key in ("ensemble/fused", *[k for k in self.entries if k.startswith("fused/")]):
            if key in self.entries:
                return key
        return next(iter(self.entries))

    def accuracy(self, key: str | None = None) -> float:
        return self.entries[key or self.headline].accuracy

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "headline": self.headline, "protocol": self.protocol,
                "entries": {k: e.to_dict() for k, e in self.entries.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        """Rebuild from serialized confusion counts; all accuracies are recomputed."""
        entries = {k: Entry(np.asarray(e["confusion"], dtype=np.int64)) for k, e in doc["entries"].items()}
        return cls(int(doc["n_classes"]), entries, doc.get("protocol", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        width = max(len(k) for k in self.entries)
        lines = [f"{'entry':<{width}}  top-1    correct/total"]
        for k, e in self.entries.items():
            lines.append(f"{k:<{width}}  {e.accuracy:6.4f}   {e.correct}/{e.total}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Protocol:
    split: str = "test"
    streams: tuple[str, ...] = ("joint",)
    formats: tuple[str, ...] = ("kinectv2",)
    ensemble: bool = False
    order: str = FORMATS_FIRST
    fusion_weights: tuple[tuple[str, float], ...] = tuple(FUSION_WEIGHTS.items())
    checkpoint_id: str = ""

    def to_dict(self) -> dict:
        return {"split": self.split, "streams": list(self.streams), "formats": list(self.formats),
                "ensemble": self.ensemble, "order": self.order,
                "fusion_weights": dict(self.fusion_weights), "checkpoint_id": self.checkpoint_id}


def evaluate_scores(scores: Mapping[tuple[str, str], np.ndarray], labels: np.ndarray,
                    n_classes: int, protocol: Protocol) -> EvalReport:
    """Build a report from per-(stream, format) softmax scores."""
    weights = dict(protocol.fusion_weights)
    for s in protocol.streams:
        for f in protocol.formats:
            if (s, f) not in scores:
                raise EvalError(f"no classifier scores for stream {s!r}, format {f!r}")
    entries: dict[str, Entry] = {}

    def add(key: str, sc: np.ndarray) -> None:
        entries[key] = Entry.from_predictions(labels, predict(sc), n_classes)

    for s in protocol.streams:
        for f in protocol.formats:
            add(f"{s}/{f}", scores[s, f])
    for f in protocol.formats:
        add(f"fused/{f}", fuse_streams({s: scores[s, f] for s in protocol.streams}, weights))
    if protocol.ensemble:
        per_stream = {s: ensemble_formats([scores[s, f] for f in protocol.formats])
                      for s in protocol.streams}
        for s, sc in per_stream.items():
            add(f"ensemble/{s}", sc)
        if protocol.order == FORMATS_FIRST:
            final = fuse_streams(per_stream, weights)
        elif protocol.order == STREAMS_FIRST:
            total = sum(weights[s] for s in protocol.streams)
            final = ensemble_formats([fuse_streams({s: scores[s, f] for s in protocol.streams}, weights) / total
                                      for f in protocol.formats])
        else:
            raise EvalError(f"unknown ensemble order {protocol.order!r}")
        add("ensemble/fused", final)
    return EvalReport(n_classes, entries, protocol.to_dict())


def evaluate(heads: Mapping[tuple[str, str], LinearHead], checkpoint: PretrainResult,
             records: Sequence[SequenceRecord], protocol: Protocol) -> EvalReport:
    split = [r for r in records if r.split_tag == protocol.split]
    if not split:
        raise EvalError(f"no records in split {protocol.split!r}")
    labels = np.array([r.label for r in split])
    n_classes = max(h.n_classes for h in heads.values())
    registry = checkpoint.registry()
    scores = {}
    for s in protocol.streams:
        for f in protocol.formats:
            if (s, f) not in heads:
                raise EvalError(f"missing classifier head for stream {s!r}, format {f!r}")
            feats = extract_embeddings(checkpoint.states[s].query, split, f, s, registry,
                                       checkpoint.config.frames)
            scores[s, f] = heads[s, f].scores(feats)
    if not protocol.checkpoint_id:
        protocol = replace(protocol, checkpoint_id=checkpoint.checkpoint_id())
    return evaluate_scores(scores, labels, n_classes, protocol)


def per_class_diff(report_a: EvalReport, report_b: EvalReport, key: str | None = None,
                   key_b: str | None = None) -> list[tuple[int, float]]:
    """``(class, accuracy_a - accuracy_b)`` sorted by decreasing difference."""
    if report_a.n_classes != report_b.n_classes:
        raise EvalError(f"class sets differ: {report_a.n_classes} vs {report_b.n_classes}")
    ea = report_a.entries[key or report_a.headline]
    eb = report_b.entries[key_b or key or report_b.headline]
    diff = ea.per_class - eb.per_class
    order = sorted(range(len(diff)), key=lambda c: (-diff[c], c))
    return [(c, float(diff[c])) for c in order]


def diff_svg(diffs: Sequence[tuple[int, float]], class_names: Sequence[str] | None = None,
             title: str = "Per-class top-1 difference") -> str:
    """Bar chart of per-class differences as a standalone SVG document."""
    bar, gap, height, pad = 18, 4, 240, 40
    width = pad * 2 + len(diffs) * (bar + gap)
    mid = pad + height / 2
    scale = (height / 2) / max(1e-9, max((abs(d) for _, d in diffs), default=0.0))
    if all(d == 0 for _, d in diffs):
        scale = 0.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 2 * pad + 20}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{mid}" x2="{width - pad}" y2="{mid}" stroke="black"/>']
    for i, (cls, d) in enumerate(diffs):
        x = pad + i * (bar + gap)
        h = abs(d) * scale
        y = mid - h if d >= 0 else mid
        color = "#2a7ab0" if d >= 0 else "#c0392b"
        name = class_names[cls] if class_names else str(cls)
        parts.append(f'<rect x="{x}" y="{y:.3f}" width="{bar}" height="{h:.3f}" fill="{color}">'
                     f'<title>{name}: {d:+.4f}</title></rect>')
        parts.append(f'<text x="{x + bar / 2}" y="{height + pad + 14}" font-size="10" '
                     f'text-anchor="middle">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
