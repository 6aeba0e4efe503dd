"""Stage 1: reference-regularized prompt learning on one client."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .encoder import BackboneParams, PromptSet, predict, zero_shot_distribution
from .errors import ConfigError, DataError
from .tensor import Tensor

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    lr: float = 0.0015
    batch_size: int = 32
    local_epochs: int = 1
    agg_lr: float = 0.0  # 0 -> same as lr
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.alpha < 0:
            out.append("alpha must be >= 0")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.lr < 0 or self.agg_lr < 0:
            out.append("learning rates must be >= 0")
        if self.optimizer != "sgd":
            out.append(f"unsupported optimizer {self.optimizer!r} (only plain 'sgd')")
        return out

    @property
    def aggregator_lr(self) -> float:
        return self.agg_lr or self.lr


@dataclass
class LocalStepReport:
    ce_loss: float
    kl_loss: float
    total_loss: float
    samples: int
    kl_clamped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-likelihood of the labelled class; log argument clamped at 1e-12."""
    probs = tn.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    picked = tn.getitem(probs, (np.arange(n), labels))
    return tn.mul(tn.sum(tn.log_clamped(picked, LOG_CLAMP)), -1.0 / n)


def kl_divergence(p_global, p_local, return_clamped: bool = False):
    """Mean over rows of KL(p_global || p_local).

    ``p_global`` is the fixed reference; gradients flow only into ``p_local``.
    Entries where the reference is zero contribute nothing.
    """
    ref = p_global.data if isinstance(p_global, Tensor) else np.asarray(p_global, dtype=np.float64)
    p_local = tn.as_tensor(p_local)
    if ref.shape != p_local.shape:
        raise DataError(f"distribution shapes differ: {ref.shape} vs {p_local.shape}")
    n = ref.shape[0]
    live = ref > 0
    entropy_term = float(np.sum(np.where(live, ref * np.log(np.where(live, ref, 1.0)), 0.0)))
    cross = tn.sum(tn.mul(tn.log_clamped(p_local, LOG_CLAMP), ref))
    kl = tn.mul(tn.sub(entropy_term, cross), 1.0 / n)
    if return_clamped:
        return kl, bool(np.any(live & (p_local.data <= LOG_CLAMP)))
    return kl


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


def reference_distribution(
    backbone: BackboneParams, global_prompts: PromptSet, images, mode: str
) -> np.ndarray:
    if mode == "zero_shot":
        return zero_shot_distribution(backbone, images)
    if mode == "global_prompts":
        with tn.no_tape():
            return predict(backbone, global_prompts, images).data
    raise ConfigError(f"unknown reference mode {mode!r}")


def local_prompt_round(
    dataset,
    backbone: BackboneParams,
    global_prompts: PromptSet,
    reference_mode: str,
    cfg: TrainConfig,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> tuple[PromptSet, list[LocalStepReport]]:
    """Train client prompts, starting from the global prompts, on CE + alpha·KL.

    ``dataset`` needs ``images`` (N×C×H×W) and ``labels`` (N,).  ``reference_mode``
    is ``"global_prompts"`` or ``"zero_shot"``; the reference is computed per
    minibatch without recording.  ``alpha`` overrides ``cfg.alpha`` (ablations).
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise DataError("client dataset is empty")
    alpha = cfg.alpha if alpha is None else alpha
    prompts = global_prompts.copy(requires_grad=True)
    params = prompts.parameters()
    reports = []
    for _ in range(cfg.local_epochs):
        for idx in minibatches(len(labels), cfg.batch_size, rng):
            x, y = images[idx], labels[idx]
            p_ref = reference_distribution(backbone, global_prompts, x, reference_mode)
            with tn.Tape() as tape:
                probs = predict(backbone, prompts, x)
                ce = cross_entropy(probs, y)
                kl, clamped = kl_divergence(p_ref, probs, return_clamped=True)
                total = tn.add(ce, tn.mul(kl, alpha))
            tn.backward(total, tape)
            sgd_step(params, cfg.lr)
            reports.append(LocalStepReport(ce.item(), kl.item(), total.item(), len(idx), clamped))
    return prompts.set_requires_grad(False), reports
