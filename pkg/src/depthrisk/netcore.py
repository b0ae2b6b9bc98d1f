"""The risk model: attention branches, collision-graph encoder, temporal fusion,
multi-scale smoothing and the video-level accident head.

Shapes follow the batch convention ``(B, T, ...)``. Per-frame scores are
causal: the score at frame t only sees frames up to t.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .geometry import EdgeWeightConfig

TOGGLES = ("context_attn", "object_attn", "collision_3d", "temporal_attn", "smooth", "accident_head")


class ShapeError(ValueError):
    pass


class SmoothError(ValueError):
    pass


def _default_toggles():
    return {name: True for name in TOGGLES}


@dataclass
class ModelConfig:
    feature_dim: int = 4096
    context_dim: int = 512
    object_dim: int = 256
    graph_dim: int = 256
    temporal_dim: int = 512
    accident_dim: int = 32
    heads: int = 8
    dropout: tuple = (0.5, 0.1)
    head_hidden: int = 64
    graph_layers: int = 2
    smooth_fields: tuple = (20, 10, 5)
    smooth_mix: float = 0.15
    accident_input: str = "scores"  # or "features"
    graph_mode: str = "3d"
    alpha_d: float = 0.6
    alpha_m: float = 0.4
    coordinate_scaling: tuple = (1.0, 1.0, 1.0)
    squared_distance: bool = True
    toggles: dict = field(default_factory=_default_toggles)

    def __post_init__(self):
        self.dropout = tuple(self.dropout)
        self.smooth_fields = tuple(int(f) for f in self.smooth_fields)
        self.coordinate_scaling = tuple(float(s) for s in self.coordinate_scaling)
        toggles = _default_toggles()
        unknown = set(self.toggles) - set(TOGGLES)
        if unknown:
            raise ValueError(f"unknown module toggles {sorted(unknown)}; known: {TOGGLES}")
        toggles.update({k: bool(v) for k, v in self.toggles.items()})
        self.toggles = toggles
        self.validate()

    def validate(self):
        dims = ("feature_dim", "context_dim", "object_dim", "graph_dim", "temporal_dim",
                "accident_dim", "heads", "head_hidden", "graph_layers")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.feature_dim % self.heads or self.context_dim % self.heads:
            raise ValueError(f"feature_dim ({self.feature_dim}) and context_dim ({self.context_dim}) "
                             f"must be divisible by heads ({self.heads})")
        if not 0.0 <= self.smooth_mix <= 1.0:
            raise ValueError("smooth_mix must lie in [0, 1]")
        if not self.smooth_fields or min(self.smooth_fields) < 1:
            raise ValueError("smooth_fields must be positive frame counts")
        if self.accident_input not in ("scores", "features"):
            raise ValueError("accident_input must be 'scores' or 'features'")
        if self.graph_mode not in geometry.MODES:
            raise ValueError(f"graph_mode must be one of {geometry.MODES}")
        if len(self.dropout) != 2 or not all(0.0 <= p < 1.0 for p in self.dropout):
            raise ValueError("dropout needs two rates in [0, 1)")

    @property
    def edge_config(self) -> EdgeWeightConfig:
        return EdgeWeightConfig(alpha_d=self.alpha_d, alpha_m=self.alpha_m,
                                coordinate_scaling=self.coordinate_scaling,
                                squared=self.squared_distance)

    @property
    def fused_dim(self) -> int:
        return self.context_dim + self.object_dim + self.graph_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = list(self.dropout)
        d["smooth_fields"] = list(self.smooth_fields)
        d["coordinate_scaling"] = list(self.coordinate_scaling)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RiskCurve:
    scores: np.ndarray  # (T,) per-frame accident probability
    video_prob: float

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any((self.scores < 0) | (self.scores > 1)) or not 0.0 <= self.video_prob <= 1.0:
            raise ValueError("risk scores must lie in [0, 1]")


# ---------------------------------------------------------------------------
# building blocks

def sum_of_heads_attention(q, k, v, heads: int, causal: bool = True):
    """Multi-head scaled dot-product attention whose heads are summed.

    q, k: (B, T, d) split into ``heads`` chunks of d/heads; v: (B, T, heads, d_v).
    Returns (B, T, d_v).
    """
    B, T, d = q.shape
    dg = d // heads
    qh = q.view(B, T, heads, dg).transpose(1, 2)
    kh = k.view(B, T, heads, dg).transpose(1, 2)
    vh = v.transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dg)
    if causal:
        future = torch.ones(T, T, dtype=torch.bool, device=q.device).triu(1)
        logits = logits.masked_fill(future, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    return (attn @ vh).sum(dim=1)


class ContextAttention(nn.Module):
    """Causal self-attention over the frame-level context features."""

    def __init__(self, in_dim, out_dim, heads):
        super().__init__()
        self.heads = heads
        self.out_dim = out_dim
        self.query = nn.Linear(in_dim, out_dim)
        self.key = nn.Linear(in_dim, out_dim)
        self.value = nn.Linear(in_dim, heads * out_dim)

    def forward(self, h):
        B, T, _ = h.shape
        v = self.value(h).view(B, T, self.heads, self.out_dim)
        return sum_of_heads_attention(self.query(h), self.key(h), v, self.heads)


class ObjectAttention(nn.Module):
    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.theta = nn.Linear(in_dim, out_dim)
        self.beta = nn.Linear(out_dim, 1, bias=False)
        self.proj = nn.Linear(in_dim, out_dim)

    def weights(self, objects, mask):
        logits = self.beta(torch.tanh(self.theta(objects))).squeeze(-1)
        return masked_softmax(logits, mask)

    def forward(self, objects, mask):
        w = self.weights(objects, mask)
        return (w.unsqueeze(-1) * self.proj(objects)).sum(dim=-2)


def masked_softmax(logits, mask, dim=-1):
    """Softmax restricted to ``mask``; rows with no true entry give all zeros."""
    logits = logits.masked_fill(~mask, float("-inf"))
    any_present = mask.any(dim=dim, keepdim=True)
    logits = torch.where(any_present, logits, torch.zeros_like(logits))
    w = torch.softmax(logits, dim=dim)
    return torch.where(mask, w, torch.zeros_like(w))


class GraphEncoder(nn.Module):
    """Message passing over the collision graph.

    Each layer computes ``tanh(S h_i + M sum_j A_ij h_j)`` with A the weight
    matrix row-normalized per node; the frame vector is the node outputs
    averaged with each node's share of the total edge weight.
    """

    def __init__(self, in_dim, out_dim, layers=2):
        super().__init__()
        dims = [in_dim] + [out_dim] * layers
        self.self_maps = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.nbr_maps = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, nodes, weights):
        share = weights.sum(dim=-1)  # (..., N), sums to 1 over a nonempty graph
        adj = weights / share.clamp_min(1e-30).unsqueeze(-1)
        h = nodes
        for s, m in zip(self.self_maps, self.nbr_maps):
            h = torch.tanh(s(h) + m(adj @ h))
        return (share.unsqueeze(-1) * h).sum(dim=-2)


class Smoother(nn.Module):
    """Residual multi-scale temporal smoothing.

    Per receptive field k the sequence is averaged over a trailing window of
    k frames (causal) and passed through a pointwise mixing layer that starts
    as the identity; the scales are averaged and added back with weight
    ``mix``.
    """

    def __init__(self, dim, fields=(20, 10, 5), mix=0.15):
        super().__init__()
        self.fields = tuple(fields)
        self.mix = mix
        self.mixers = nn.ModuleList(nn.Linear(dim, dim) for _ in self.fields)
        with torch.no_grad():
            for lin in self.mixers:
                lin.weight.copy_(torch.eye(dim))
                lin.bias.zero_()

    def forward(self, x):
        T = x.shape[1]
        if T < max(self.fields):
            raise SmoothError(f"sequence of {T} frames is shorter than the largest receptive field "
                              f"{max(self.fields)}; use smaller smooth_fields")
        out = 0
        for k, lin in zip(self.fields, self.mixers):
            out = out + lin(causal_box_mean(x, k))
        return x + self.mix * out / len(self.fields)


def causal_box_mean(x, k):
    """Mean of the last ``k`` frames (fewer at the start) along dim 1."""
    c = torch.cumsum(x, dim=1)
    shifted = torch.zeros_like(c)
    if k < x.shape[1]:
        shifted[:, k:] = c[:, :-k]
    counts = torch.clamp(torch.arange(1, x.shape[1] + 1, device=x.device, dtype=x.dtype), max=k)
    return (c - shifted) / counts.view(1, -1, *([1] * (x.dim() - 2)))


def running_statistics(seq):
    """Causal mean, population variance, max and deviation-from-mean of (B, T) scores.

    Returns (B, T, 4); the last frame holds the statistics of the whole clip.
    """
    T = seq.shape[1]
    n = torch.arange(1, T + 1, device=seq.device, dtype=seq.dtype)
    mean = torch.cumsum(seq, dim=1) / n
    var = torch.cumsum(seq * seq, dim=1) / n - mean * mean
    var = var.clamp_min(0.0)
    mx = torch.cummax(seq, dim=1).values
    return torch.stack([mean, var, mx, seq - mean], dim=-1)


def feature_statistics(feats):
    """Per-frame mean, variance, max and max-minus-mean over the feature axis."""
    mean = feats.mean(dim=-1)
    var = feats.var(dim=-1, unbiased=False)
    mx = feats.max(dim=-1).values
    return torch.stack([mean, var, mx, mx - mean], dim=-1)


class AccidentHead(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        self.embed = nn.Linear(4, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True)
        self.out = nn.Linear(hidden, 2)

    def forward(self, stats):
        _, h = self.gru(self.embed(stats))
        return torch.softmax(self.out(h[-1]), dim=-1)[:, 1]


# ---------------------------------------------------------------------------

class RiskModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.feature_dim
        self.context_attn = ContextAttention(D, cfg.context_dim, cfg.heads)
        self.object_attn = ObjectAttention(D, cfg.object_dim)
        self.graph = GraphEncoder(2 * D, cfg.graph_dim, cfg.graph_layers)
        self.fusion_weight = nn.Parameter(torch.ones(cfg.fused_dim))
        self.gru = nn.GRU(cfg.fused_dim, cfg.temporal_dim, batch_first=True)
        self.smoother = Smoother(cfg.temporal_dim, cfg.smooth_fields, cfg.smooth_mix)
        p1, p2 = cfg.dropout
        self.score_head = nn.Sequential(
            nn.Dropout(p1), nn.Linear(cfg.temporal_dim, cfg.head_hidden), nn.ReLU(),
            nn.Dropout(p2), nn.Linear(cfg.head_hidden, 2))
        self.accident = AccidentHead(cfg.accident_dim)

    def fusion_attention(self, fm):
        """Feature-wise attention weights; each frame's row sums to 1."""
        return torch.softmax(torch.tanh(fm) * self.fusion_weight, dim=-1)

    def fuse(self, fm):
        """Reweight the concatenated branches; uniform attention is the identity."""
        if not self.cfg.toggles["temporal_attn"]:
            return fm
        return fm * self.fusion_attention(fm) * fm.shape[-1]

    def forward(self, context, objects, mask, weights=None):
        """context (B,T,D), objects (B,T,N,D), mask (B,T,N), weights (B,T,N,N).

        Returns per-frame scores (B, T) and video probabilities (B,).
        """
        cfg = self.cfg
        tg = cfg.toggles
        B, T, D = context.shape
        if D != cfg.feature_dim or objects.shape[-1] != D:
            raise ShapeError(f"expected feature dim {cfg.feature_dim}, got {D}/{objects.shape[-1]}")
        if objects.shape[:2] != (B, T) or mask.shape != objects.shape[:3]:
            raise ShapeError("context, objects and mask disagree on (B, T, N)")
        dtype = context.dtype
        mask = mask.bool()

        if tg["context_attn"]:
            i_c = self.context_attn(context)
        else:
            i_c = context.new_zeros(B, T, cfg.context_dim)
        if tg["object_attn"]:
            i_o = self.object_attn(objects, mask)
        else:
            i_o = context.new_zeros(B, T, cfg.object_dim)
        if tg["collision_3d"]:
            if weights is None:
                raise ShapeError("collision graph weights are required when collision_3d is on")
            N = objects.shape[2]
            nodes = torch.cat([context.unsqueeze(2).expand(B, T, N, D), objects], dim=-1)
            nodes = nodes * mask.unsqueeze(-1).to(dtype)
            g = self.graph(nodes, weights.to(dtype))
        else:
            g = context.new_zeros(B, T, cfg.graph_dim)

        fm = torch.cat([i_c, i_o, g], dim=-1)
        hidden, _ = self.gru(self.fuse(fm))
        if tg["smooth"]:
            hidden = self.smoother(hidden)
        scores = torch.softmax(self.score_head(hidden), dim=-1)[..., 1]

        if not tg["accident_head"]:
            video = scores.max(dim=1).values
        elif cfg.accident_input == "scores":
            video = self.accident(running_statistics(scores))
        else:
            video = self.accident(feature_statistics(fm))
        return scores, video


# ---------------------------------------------------------------------------
# sample -> tensors

def sample_weights(sample, cfg: ModelConfig) -> np.ndarray:
    """Graph weights of a sample, or zeros when the collision branch is off."""
    T, N = sample.mask.shape
    if not cfg.toggles["collision_3d"]:
        return np.zeros((T, N, N))
    return geometry.video_weights(sample, cfg.graph_mode, cfg.edge_config)


def collate(samples, cfg: ModelConfig, weights=None, dtype=torch.float32) -> dict:
    """Stack samples into model inputs plus labels and accident frames."""
    if weights is None:
        weights = [sample_weights(s, cfg) for s in samples]
    return {
        "context": torch.as_tensor(np.stack([s.context for s in samples]), dtype=dtype),
        "objects": torch.as_tensor(np.stack([s.objects for s in samples]), dtype=dtype),
        "mask": torch.as_tensor(np.stack([s.mask for s in samples])),
        "weights": torch.as_tensor(np.stack(weights), dtype=dtype),
        "labels": torch.tensor([s.label for s in samples], dtype=dtype),
        "taus": torch.tensor([s.accident_frame for s in samples], dtype=torch.long),
    }


def forward(sample, model: RiskModel, cfg: Optional[ModelConfig] = None) -> RiskCurve:
    """Risk curve of one sample with the model in evaluation mode."""
    cfg = cfg or model.cfg
    if sample.feature_dim != cfg.feature_dim:
        raise ShapeError(f"sample {sample.sample_id} has feature dim {sample.feature_dim}, "
                         f"model expects {cfg.feature_dim}")
    batch = collate([sample], cfg, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            scores, video = model(batch["context"], batch["objects"], batch["mask"], batch["weights"])
    finally:
        model.train(was_training)
    return RiskCurve(scores[0].double().numpy(), float(video[0]))


# ---------------------------------------------------------------------------
# checkpoint container
#
#   bytes 0-7    magic b"DRCKPT\0\0"
#   bytes 8-11   format version, uint32 little-endian
#   bytes 12-15  header length H, uint32 little-endian
#   next H bytes UTF-8 JSON header: configs, metadata and the tensor table
#                [{"name", "shape", "offset", "count"}] in storage order
#   remainder    tensor payloads, little-endian float32, row-major, concatenated

CHECKPOINT_MAGIC = b"DRCKPT\x00\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: dict, header: Optional[dict] = None) -> str:
    """Write named arrays plus a JSON header; returns the payload sha256."""
    table, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(blobs)
    digest = hashlib.sha256(payload).hexdigest()
    head = dict(header or {})
    head.update({"tensors": table, "sha256": digest})
    raw = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(payload)
    return digest


def load_checkpoint(path):
    """Returns (header dict, {name: float32 ndarray})."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {version}, newer than {CHECKPOINT_VERSION}")
    header = json.loads(data[16:16 + hlen])
    payload = data[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for entry in header["tensors"]:
        chunk = flat[entry["offset"]:entry["offset"] + entry["count"]]
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).copy()
    return header, arrays


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()
