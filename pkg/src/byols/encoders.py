"""Audio encoders mapping a standardized ``(64, T)`` log-mel spectrogram to a fixed embedding.

Four architectures are available (see :class:`Arch`). Every encoder ends with
the same temporal aggregation: per-feature mean over time plus per-feature max
over time (summed, so the embedding size does not double).

``width_multiplier`` scales every channel/hidden width; 1.0 gives the
full-size networks, 0.125 the desk-scale variants used in tests.

Stage widths (multiplier 1.0):

* ``DefaultCnn``: 3 x [conv3x3(64) - BN - ReLU - maxpool2x2], per-frame
  linear 512 -> 2048 -> 2048 (ReLU, dropout 0.3 in between).
* ``Resnetish34``: 1-channel 7x7/2 stem + 3x3/2 max-pool, basic-block stages
  [3, 4, 6, 3] at widths [64, 128, 256, 512] (strides 1, 2, 2, 2), frequency
  mean, per-frame linear 512 -> 2048.
* ``Clstm``: conv 9x9 (256) - BN - ReLU - freq max-pool 4, conv 4x3 (256,
  no frequency padding) - BN - ReLU, one BiLSTM with 512 units per direction,
  per-frame linear 1024 -> 1024.
* ``CvtLite``: three stages of convolutional token embedding (7x7/4, 3x3/2,
  3x3/2) at widths 64/256/512, each followed by one convolutional-projection
  transformer block (1/2/4 heads of size 64, MLP ratio 4, key/value
  projection stride 2). The final map (512 channels x 4 frequency bins) is
  flattened per frame to 2048.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

MIN_FRAMES = 8
N_MELS = 64


class EncoderError(ValueError):
    pass


class Arch(str, enum.Enum):
    DefaultCnn = "DefaultCnn"
    Resnetish34 = "Resnetish34"
    Clstm = "Clstm"
    CvtLite = "CvtLite"


def scaled(n: int, m: float) -> int:
    return max(1, int(round(n * m)))


@dataclass
class EncoderConfig:
    arch: Arch = Arch.DefaultCnn
    width_multiplier: float = 1.0
    seed: int = 0
    dropout: float = 0.3

    def __post_init__(self):
        self.arch = Arch(self.arch)
        if not (self.width_multiplier == 1.0 or 0 < self.width_multiplier < 1):
            raise EncoderError("width_multiplier must be 1.0 or in (0, 1)")

    @property
    def embedding_dim(self) -> int:
        base = 1024 if self.arch == Arch.Clstm else 2048
        return scaled(base, self.width_multiplier)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        return d


def temporal_pool(fm, time_axis: int = 0):
    """Mean over time plus max over time, elementwise.

    Works on numpy arrays and torch tensors; the time axis is removed.
    """
    if isinstance(fm, torch.Tensor):
        return fm.mean(dim=time_axis) + fm.amax(dim=time_axis)
    fm = np.asarray(fm)
    return fm.mean(axis=time_axis) + fm.max(axis=time_axis)


class _Recorder:
    """Collects named intermediate activations during a forward pass."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.layers: "OrderedDict[str, torch.Tensor]" = OrderedDict()

    def __call__(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if self.enabled:
            self.layers[name] = x
        return x


class Encoder(nn.Module):
    embedding_dim: int

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._forward(self._prepare(x), _Recorder(False))

    def layer_outputs(self, x: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        """Activations after every block, in forward order (final embedding last)."""
        rec = _Recorder(True)
        rec("embedding", self._forward(self._prepare(x), rec))
        return rec.layers

    @staticmethod
    def _prepare(x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != N_MELS:
            raise EncoderError(f"expected input (B, {N_MELS}, T), got {tuple(x.shape)}")
        if x.shape[-1] < MIN_FRAMES:
            raise EncoderError("input too short for encoder")
        return x

    def _forward(self, x, rec):
        raise NotImplementedError


class DefaultCnn(Encoder):
    def __init__(self, m: float = 1.0, dropout: float = 0.3):
        super().__init__()
        c = scaled(64, m)
        d = scaled(2048, m)
        self.embedding_dim = d
        blocks = []
        in_ch = 1
        for _ in range(3):
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(), nn.MaxPool2d(2)
            ))
            in_ch = c
        self.blocks = nn.ModuleList(blocks)
        self.fc1 = nn.Linear(c * (N_MELS // 8), d)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(d, d)

    def _forward(self, x, rec):
        for i, block in enumerate(self.blocks):
            x = rec(f"conv{i + 1}", block(x))
        b, c, f, t = x.shape
        x = x.permute(0, 3, 2, 1).reshape(b, t, f * c)
        x = rec("fc1", F.relu(self.fc1(x)))
        x = rec("fc2", F.relu(self.fc2(self.dropout(x))))
        return temporal_pool(x, time_axis=1)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Resnetish34(Encoder):
    LAYERS = (3, 4, 6, 3)
    WIDTHS = (64, 128, 256, 512)

    def __init__(self, m: float = 1.0):
        super().__init__()
        widths = [scaled(w, m) for w in self.WIDTHS]
        self.embedding_dim = scaled(2048, m)
        self.stem = nn.Sequential(
            nn.Conv2d(1, widths[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        in_ch = widths[0]
        for i, (n, w) in enumerate(zip(self.LAYERS, widths)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, w, stride)] + [BasicBlock(w, w, 1) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(in_ch, self.embedding_dim)

    def _forward(self, x, rec):
        x = rec("stem", self.stem(x))
        for i, stage in enumerate(self.stages):
            x = rec(f"stage{i + 1}", stage(x))
        x = x.mean(dim=2).transpose(1, 2)  # (B, T', C)
        x = rec("fc", F.relu(self.fc(x)))
        return temporal_pool(x, time_axis=1)


class Clstm(Encoder):
    def __init__(self, m: float = 1.0):
        super().__init__()
        c = scaled(256, m)
        h = scaled(512, m)
        self.embedding_dim = scaled(1024, m)
        self.conv1 = nn.Sequential(nn.Conv2d(1, c, 9, padding=4), nn.BatchNorm2d(c), nn.ReLU(), nn.MaxPool2d((4, 1)))
        self.conv2 = nn.Sequential(nn.Conv2d(c, c, (4, 3), padding=(0, 1)), nn.BatchNorm2d(c), nn.ReLU())
        freq = N_MELS // 4 - 3
        self.lstm = nn.LSTM(c * freq, h, batch_first=True, bidirectional=True)
        self.fc = nn.Linear(2 * h, self.embedding_dim)

    def _forward(self, x, rec):
        x = rec("conv1", self.conv1(x))
        x = rec("conv2", self.conv2(x))
        b, c, f, t = x.shape
        x = x.permute(0, 3, 1, 2).reshape(b, t, c * f)
        x, _ = self.lstm(x)
        rec("bilstm", x)
        x = rec("fc", F.relu(self.fc(x)))
        return temporal_pool(x, time_axis=1)


class ChanLayerNorm(nn.Module):
    """Layer norm over the channel axis of a ``(B, C, H, W)`` map."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = nn.Parameter(torch.ones(1, dim, 1, 1))
        self.b = nn.Parameter(torch.zeros(1, dim, 1, 1))

    def forward(self, x):
        var = torch.var(x, dim=1, unbiased=False, keepdim=True)
        mean = torch.mean(x, dim=1, keepdim=True)
        return (x - mean) / (var + self.eps).sqrt() * self.g + self.b


class DepthWiseConv(nn.Module):
    def __init__(self, dim_in: int, dim_out: int, kernel: int, padding: int, stride: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(dim_in, dim_in, kernel, stride, padding, groups=dim_in, bias=False),
            nn.BatchNorm2d(dim_in),
            nn.Conv2d(dim_in, dim_out, 1, bias=False),
        )

    def forward(self, x):
        return self.net(x)


class ConvAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dim_head: int, kv_stride: int = 2):
        super().__init__()
        inner = heads * dim_head
        self.heads = heads
        self.scale = dim_head**-0.5
        self.to_q = DepthWiseConv(dim, inner, 3, 1, 1)
        self.to_kv = DepthWiseConv(dim, inner * 2, 3, 1, kv_stride)
        self.to_out = nn.Conv2d(inner, dim, 1)

    def forward(self, x):
        b, _, h, w = x.shape
        q = self.to_q(x)
        k, v = self.to_kv(x).chunk(2, dim=1)

        def split(t):
            # (B, heads*d, H, W) -> (B*heads, H*W, d)
            bb, hd, hh, ww = t.shape
            d = hd // self.heads
            return t.reshape(bb, self.heads, d, hh * ww).permute(0, 1, 3, 2).reshape(bb * self.heads, hh * ww, d)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = attn @ v  # (B*heads, H*W, d)
        d = out.shape[-1]
        out = out.reshape(b, self.heads, h * w, d).permute(0, 1, 3, 2).reshape(b, self.heads * d, h, w)
        return self.to_out(out)


class CvtBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dim_head: int, mlp_mult: int = 4):
        super().__init__()
        self.norm1 = ChanLayerNorm(dim)
        self.attn = ConvAttention(dim, heads, dim_head)
        self.norm2 = ChanLayerNorm(dim)
        self.ff = nn.Sequential(nn.Conv2d(dim, dim * mlp_mult, 1), nn.GELU(), nn.Conv2d(dim * mlp_mult, dim, 1))

    def forward(self, x):
        x = self.attn(self.norm1(x)) + x
        return self.ff(self.norm2(x)) + x


class CvtLite(Encoder):
    DIMS = (64, 256, 512)
    KERNELS = (7, 3, 3)
    STRIDES = (4, 2, 2)
    HEADS = (1, 2, 4)
    DIM_HEAD = 64

    def __init__(self, m: float = 1.0):
        super().__init__()
        dims = [scaled(d, m) for d in self.DIMS]
        dim_head = scaled(self.DIM_HEAD, m)
        stages = []
        in_ch = 1
        for dim, k, s, heads in zip(dims, self.KERNELS, self.STRIDES, self.HEADS):
            stages.append(nn.ModuleDict({
                "embed": nn.Conv2d(in_ch, dim, k, s, k // 2),
                "embed_norm": ChanLayerNorm(dim),
                "block": CvtBlock(dim, heads, dim_head),
            }))
            in_ch = dim
        self.stages = nn.ModuleList(stages)
        self.stage_dims = dims
        self.embedding_dim = dims[-1] * (N_MELS // 16)

    def _forward(self, x, rec):
        for i, st in enumerate(self.stages):
            x = st["embed_norm"](st["embed"](x))
            x = rec(f"stage{i + 1}", st["block"](x))
        b, c, f, t = x.shape
        x = x.permute(0, 3, 2, 1).reshape(b, t, f * c)
        return temporal_pool(x, time_axis=1)


def build_encoder(cfg: EncoderConfig) -> Encoder:
    """Construct the encoder with parameters initialized from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        m = cfg.width_multiplier
        if cfg.arch == Arch.DefaultCnn:
            enc = DefaultCnn(m, cfg.dropout)
        elif cfg.arch == Arch.Resnetish34:
            enc = Resnetish34(m)
        elif cfg.arch == Arch.Clstm:
            enc = Clstm(m)
        else:
            enc = CvtLite(m)
    assert enc.embedding_dim == cfg.embedding_dim
    return enc


def count_parameters(cfg_or_module) -> int:
    """Exact number of trainable parameters."""
    module = build_encoder(cfg_or_module) if isinstance(cfg_or_module, EncoderConfig) else cfg_or_module
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class Embedding:
    values: np.ndarray
    source_id: str = ""
    timestamp_s: float | None = None


@torch.no_grad()
def embed_batch(encoder: Encoder, batch: np.ndarray) -> np.ndarray:
    """Inference-mode embeddings for a stacked ``(B, 64, T)`` batch."""
    was_training = encoder.training
    encoder.eval()
    try:
        dtype = next(encoder.parameters()).dtype
        out = encoder(torch.as_tensor(np.asarray(batch), dtype=dtype))
    finally:
        encoder.train(was_training)
    return out.double().numpy()


def encode(encoder: Encoder, lms, source_id: str = "") -> Embedding:
    """Embed one (already standardized) spectrogram in inference mode."""
    values = lms.values if hasattr(lms, "values") else np.asarray(lms)
    return Embedding(embed_batch(encoder, values[None])[0], source_id)
