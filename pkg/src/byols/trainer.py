"""Online/target bootstrap training with optional handcrafted-feature supervision.

The online branch is encoder -> projector -> predictor, the target branch is an
exponential moving average copy of encoder -> projector. Training minimizes

    l_hybrid = alpha * l_sup + beta * l_ss

where ``l_ss`` is the MSE between online predictions of one view and target
projections of the other, and ``l_sup`` the MSE between online predictions and
standardized handcrafted features of the source clip (hybrid mode only).
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .augment import AugmentationConfig, MixupMemoryBank, make_view_pair
from .encoders import Encoder, EncoderConfig, build_encoder, scaled
from .frontend import LogMelSpectrogram, NormalizationStats


class TrainingError(RuntimeError):
    pass


class TrainingDivergence(TrainingError):
    def __init__(self, msg: str = "divergence"):
        super().__init__(msg)


@dataclass
class HeadConfig:
    projector_hidden: int = 4096
    projector_out: int = 256
    predictor_hidden: int = 4096
    use_predictor: bool = True

    @classmethod
    def scaled_for(cls, width_multiplier: float, projector_out: int = 256) -> "HeadConfig":
        hidden = scaled(4096, width_multiplier)
        return cls(hidden, projector_out, hidden)


@dataclass
class HybridLossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights need alpha, beta >= 0 and alpha + beta > 0")


@dataclass
class LossBreakdown:
    l_ss: float
    l_sup: float
    l_hybrid: float
    projection_variance: float = float("nan")


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 3e-4
    epochs: int = 100
    hybrid: bool = False
    weights: HybridLossWeights = field(default_factory=HybridLossWeights)
    symmetrize: bool = True
    normalized_mse: bool = False
    ema_decay: float = 0.99
    sup_target: str = "predictor"  # or "projector"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = HybridLossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("batch_size, learning_rate must be positive and epochs >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.sup_target not in ("predictor", "projector"):
            raise ValueError("sup_target must be 'predictor' or 'projector'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def mlp_head(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class BYOLNetwork(nn.Module):
    def __init__(self, encoder: Encoder, heads: HeadConfig):
        super().__init__()
        self.heads = heads
        self.online_encoder = encoder
        self.online_projector = mlp_head(encoder.embedding_dim, heads.projector_hidden, heads.projector_out)
        if heads.use_predictor:
            self.predictor = mlp_head(heads.projector_out, heads.predictor_hidden, heads.projector_out)
        else:
            self.predictor = nn.Identity()
        self.target_encoder = copy.deepcopy(self.online_encoder)
        self.target_projector = copy.deepcopy(self.online_projector)
        for p in self.target_parameters():
            p.requires_grad_(False)

    def online_modules(self):
        return [self.online_encoder, self.online_projector, self.predictor]

    def online_parameters(self):
        for m in self.online_modules():
            yield from m.parameters()

    def target_parameters(self):
        yield from self.target_encoder.parameters()
        yield from self.target_projector.parameters()

    def target_pairs(self):
        """(target tensor, online tensor) pairs for every parameter and float buffer."""
        for tgt, onl in ((self.target_encoder, self.online_encoder), (self.target_projector, self.online_projector)):
            for (n1, a), (n2, b) in zip(tgt.named_parameters(), onl.named_parameters()):
                yield a, b
            for (n1, a), (n2, b) in zip(tgt.named_buffers(), onl.named_buffers()):
                yield a, b

    def project_online(self, views: torch.Tensor) -> torch.Tensor:
        return self.online_projector(self.online_encoder(views))

    def forward_online(self, views: torch.Tensor) -> torch.Tensor:
        """Online prediction for a ``(B, 64, T)`` batch of views."""
        return self.predictor(self.project_online(views))

    @torch.no_grad()
    def forward_target(self, views: torch.Tensor) -> torch.Tensor:
        """Target projection; never part of the autograd graph.

        In train mode batch-norm uses batch statistics, but the target's running
        buffers are restored afterwards so the target changes only through EMA.
        """
        mods = (self.target_encoder, self.target_projector)
        saved = [[b.clone() for b in m.buffers()] for m in mods] if self.training else None
        out = self.target_projector(self.target_encoder(views))
        if saved is not None:
            for m, bufs in zip(mods, saved):
                for b, s in zip(m.buffers(), bufs):
                    b.copy_(s)
        return out


def ss_loss(prediction: torch.Tensor, target: torch.Tensor, normalized: bool = False) -> torch.Tensor:
    """Mean over batch and dimensions of squared differences.

    With ``normalized`` both sides are L2-normalized per row and the loss is the
    batch mean of ``2 - 2 cos``.
    """
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}")
    if normalized:
        p = F.normalize(prediction, dim=-1)
        t = F.normalize(target, dim=-1)
        return (2.0 - 2.0 * (p * t).sum(dim=-1)).mean()
    return ((prediction - target) ** 2).mean()


def sup_loss(prediction: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    if prediction.shape != features.shape:
        raise ValueError(f"prediction length {tuple(prediction.shape)} != feature length {tuple(features.shape)}")
    return ((prediction - features) ** 2).mean()


def hybrid_loss(l_sup, l_ss, w: HybridLossWeights):
    return w.alpha * l_sup + w.beta * l_ss


@torch.no_grad()
def ema_update_tensors(targets: Iterable[torch.Tensor], onlines: Iterable[torch.Tensor], tau: float) -> None:
    """``target <- tau * target + (1 - tau) * online`` in place."""
    for t, o in zip(targets, onlines):
        if t.shape != o.shape:
            raise ValueError("target/online shape mismatch")
        if not t.is_floating_point():
            t.copy_(o)
        elif tau == 1.0:
            continue
        elif tau == 0.0:
            t.copy_(o)
        else:
            t.mul_(tau).add_(o, alpha=1.0 - tau)


@dataclass
class TrainerState:
    network: BYOLNetwork
    optimizer: torch.optim.Optimizer
    ema_decay: float
    stats: NormalizationStats
    aug: AugmentationConfig
    bank: MixupMemoryBank
    rng: np.random.Generator
    seed: int = 0
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def ema_update(state: TrainerState) -> TrainerState:
    pairs = list(state.network.target_pairs())
    ema_update_tensors([t for t, _ in pairs], [o for _, o in pairs], state.ema_decay)
    return state


def init_state(
    encoder_cfg: EncoderConfig,
    heads: HeadConfig,
    cfg: TrainConfig,
    aug: AugmentationConfig,
    stats: NormalizationStats,
    seed: int = 0,
) -> TrainerState:
    encoder = build_encoder(encoder_cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        net = BYOLNetwork(encoder, heads)
    opt = torch.optim.Adam(net.online_parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return TrainerState(
        network=net,
        optimizer=opt,
        ema_decay=cfg.ema_decay,
        stats=stats,
        aug=aug,
        bank=MixupMemoryBank(aug.memory_capacity),
        rng=np.random.default_rng([seed, aug.seed]),
        seed=seed,
    )


def _as_tensor(arrays: Sequence[np.ndarray], like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.stack(arrays), dtype=dtype)


def compute_losses(
    net: BYOLNetwork,
    view_a: torch.Tensor,
    view_b: torch.Tensor,
    features: torch.Tensor | None,
    cfg: TrainConfig,
):
    """Differentiable ``(l_hybrid, l_ss, l_sup, online projections)`` for one pair of view batches."""
    z_a = net.project_online(view_a)
    p_a = net.predictor(z_a)
    t_b = net.forward_target(view_b)
    l_ss = ss_loss(p_a, t_b, cfg.normalized_mse)
    outs_a = p_a if cfg.sup_target == "predictor" else z_a
    if cfg.symmetrize:
        z_b = net.project_online(view_b)
        p_b = net.predictor(z_b)
        t_a = net.forward_target(view_a)
        l_ss = 0.5 * (l_ss + ss_loss(p_b, t_a, cfg.normalized_mse))
        outs_b = p_b if cfg.sup_target == "predictor" else z_b
    if cfg.hybrid:
        if features is None:
            raise TrainingError("hybrid mode requires features")
        l_sup = sup_loss(outs_a, features)
        if cfg.symmetrize:
            l_sup = 0.5 * (l_sup + sup_loss(outs_b, features))
        total = hybrid_loss(l_sup, l_ss, cfg.weights)
    else:
        l_sup = torch.zeros((), dtype=l_ss.dtype)
        total = cfg.weights.beta * l_ss
    return total, l_ss, l_sup, z_a


def train_step(
    state: TrainerState,
    batch: Sequence[LogMelSpectrogram],
    features: Sequence[np.ndarray] | np.ndarray | None,
    cfg: TrainConfig,
) -> tuple[TrainerState, LossBreakdown]:
    """One optimizer step on a batch of (unstandardized) spectrograms.

    ``features`` are the standardized handcrafted vectors aligned 1:1 with
    ``batch`` (hybrid mode only).
    """
    if len(batch) == 0:
        raise TrainingError("empty batch")
    if cfg.hybrid:
        if features is None or len(features) != len(batch):
            raise TrainingError("features must align 1:1 with the batch in hybrid mode")
    if not all(np.isfinite(lms.values).all() for lms in batch):
        raise TrainingError("non-finite values in input batch")
    net = state.network
    pairs = [make_view_pair(lms, state.stats, state.aug, state.bank, state.rng) for lms in batch]
    view_a = _as_tensor([p.view_a.values for p in pairs], net)
    view_b = _as_tensor([p.view_b.values for p in pairs], net)
    feats = _as_tensor(list(features), net) if cfg.hybrid else None

    torch.manual_seed(state.seed * 1_000_003 + state.step)
    net.train()
    state.optimizer.zero_grad(set_to_none=True)
    total, l_ss, l_sup, z_a = compute_losses(net, view_a, view_b, feats, cfg)
    if not torch.isfinite(total):
        raise TrainingDivergence()
    total.backward()
    state.optimizer.step()
    ema_update(state)
    state.step += 1
    variance = float(z_a.detach().var(dim=0, unbiased=False).mean()) if len(batch) > 1 else float("nan")
    out = LossBreakdown(l_ss.item(), l_sup.item(), total.item(), variance)
    return state, out


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2 and n >= 2:
            continue  # batch-norm needs more than one example
        yield idx


def fit(
    state: TrainerState,
    corpus: Sequence[LogMelSpectrogram],
    features: np.ndarray | None,
    cfg: TrainConfig,
    epochs: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> list[LossBreakdown]:
    """Train for ``epochs`` (default ``cfg.epochs``) passes over ``corpus``."""
    history = []
    n_epochs = cfg.epochs if epochs is None else epochs
    for _ in range(n_epochs):
        for idx in iterate_batches(len(corpus), cfg.batch_size, state.rng):
            batch = [corpus[i] for i in idx]
            feats = features[idx] if cfg.hybrid else None
            _, lb = train_step(state, batch, feats, cfg)
            history.append(lb)
            if log is not None:
                log({
                    "step": state.step,
                    "epoch": state.epoch,
                    "l_ss": lb.l_ss,
                    "l_sup": lb.l_sup,
                    "l_hybrid": lb.l_hybrid,
                    "wall_time": time.time(),
                })
        state.epoch += 1
    state.history.extend(history)
    return history


def jsonl_logger(path) -> Callable[[dict], None]:
    def _log(record: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    return _log


def epoch_means(history: Sequence[LossBreakdown], steps_per_epoch: int) -> list[float]:
    vals = [h.l_hybrid for h in history]
    return [float(np.mean(vals[i : i + steps_per_epoch])) for i in range(0, len(vals), steps_per_epoch)]
