"""Synthetic multi-domain image classification data.

Every class owns a fixed base pattern (a few coloured sinusoidal gratings)
shared by all domains.  A domain re-colours the pattern with a per-channel
affine map (possibly inverting a channel), adds Gaussian pixel noise and,
optionally, random translations.  Labels mean the same thing everywhere;
only the pixel statistics move between domains.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import BackboneParams, ModelConfig, predict, zero_shot_distribution
from .errors import ConfigError, DataError, WarmupError
from .local_training import cross_entropy, minibatches


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    class_seed: int = 0
    gain: tuple[float, ...] = (1.0, 1.0, 1.0)
    bias: tuple[float, ...] = (0.0, 0.0, 0.0)
    noise_std: float = 0.1
    jitter: int = 0
    samples_per_class: int = 100

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DomainDataset:
    images: np.ndarray  # (N, channels, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    domain_id: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "DomainDataset":
        return DomainDataset(self.images[idx], self.labels[idx], self.domain_id)


@dataclass
class ClientSplit:
    domain_id: int
    train: DomainDataset
    val: DomainDataset


@dataclass(frozen=True)
class DatasetConfig:
    n_domains: int = 4
    samples_per_class: int = 100
    noise_std: float = 0.1
    jitter: int = 0
    class_seed: int = 7
    shift_scale: float = 1.0
    warmup_domains: int = 8
    warmup_samples_per_class: int = 60
    warmup_steps: int = 300
    warmup_lr: float = 3e-3
    warmup_batch: int = 32
    val_fraction: float = 0.1

    def problems(self) -> list[str]:
        out = []
        if self.n_domains < 2:
            out.append("n_domains must be >= 2")
        if self.samples_per_class < 1:
            out.append("samples_per_class must be >= 1")
        if self.warmup_steps < 0:
            out.append("warmup_steps must be >= 0")
        if not 0 <= self.val_fraction < 1:
            out.append("val_fraction must lie in [0, 1)")
        return out


def class_patterns(n_classes: int, size: int, channels: int, class_seed: int) -> np.ndarray:
    """(C, channels, size, size) base patterns in [0, 1]."""
    rng = np.random.default_rng(class_seed)
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    out = np.empty((n_classes, channels, size, size))
    for c in range(n_classes):
        img = np.zeros((channels, size, size))
        for _ in range(3):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.0, 3.0)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            colour = rng.normal(0.0, 1.0, channels)
            img += colour[:, None, None] * wave[None]
        img /= np.abs(img).max()
        out[c] = 0.5 + 0.45 * img
    return out


def random_domain_specs(
    n: int, seed: int, samples_per_class: int = 100, noise_std: float = 0.1,
    jitter: int = 0, class_seed: int = 7, shift_scale: float = 1.0, channels: int = 3,
    first_id: int = 0,
) -> list[DomainSpec]:
    """Domains with random per-channel colour affines; roughly one channel in three is inverted."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        mag = rng.uniform(0.6, 1.2, channels)
        sign = np.where(rng.random(channels) < 0.35 * shift_scale, -1.0, 1.0)
        gain = 1.0 + shift_scale * (sign * mag - 1.0)
        bias = shift_scale * rng.uniform(-0.2, 0.2, channels)
        specs.append(DomainSpec(
            domain_id=first_id + i, class_seed=class_seed,
            gain=tuple(float(g) for g in gain), bias=tuple(float(b) for b in bias),
            noise_std=noise_std, jitter=jitter, samples_per_class=samples_per_class,
        ))
    return specs


def generate_domain(spec: DomainSpec, seed: int, model_cfg: ModelConfig) -> DomainDataset:
    """Deterministic in (spec, seed)."""
    if len(spec.gain) != model_cfg.channels or len(spec.bias) != model_cfg.channels:
        raise ConfigError("domain colour transform must have one entry per channel")
    size = model_cfg.image_size
    base = class_patterns(model_cfg.n_classes, size, model_cfg.channels, spec.class_seed)
    gain = np.asarray(spec.gain)[:, None, None]
    bias = np.asarray(spec.bias)[:, None, None]
    shifted = np.clip(0.5 + gain * (base - 0.5) + bias, 0.0, 1.0)
    rng = np.random.default_rng([seed, spec.domain_id])
    n_per = spec.samples_per_class
    labels = np.repeat(np.arange(model_cfg.n_classes), n_per)
    images = np.repeat(shifted, n_per, axis=0)
    if spec.jitter:
        shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(labels), 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
    if spec.noise_std:
        images = images + rng.normal(0.0, spec.noise_std, images.shape)
    return DomainDataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), spec.domain_id)


def train_val_split(ds: DomainDataset, val_fraction: float, seed: int) -> ClientSplit:
    rng = np.random.default_rng([seed, ds.domain_id, 17])
    order = rng.permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ClientSplit(ds.domain_id, ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val])))


def leave_one_out(
    specs: list[DomainSpec], held_out: int, seed: int, model_cfg: ModelConfig, val_fraction: float = 0.1
) -> tuple[list[ClientSplit], DomainDataset]:
    """One client per remaining domain (90/10 train/val), plus the held-out target."""
    if len(specs) < 2:
        raise ConfigError("leave-one-out needs at least two domains")
    ids = [s.domain_id for s in specs]
    if held_out not in ids:
        raise ConfigError(f"held-out domain {held_out} not among {ids}")
    clients, target = [], None
    for spec in specs:
        ds = generate_domain(spec, seed, model_cfg)
        if spec.domain_id == held_out:
            target = ds
        else:
            clients.append(train_val_split(ds, val_fraction, seed))
    return clients, target


def experiment_domains(cfg: DatasetConfig, model_cfg: ModelConfig, seed: int) -> list[DomainSpec]:
    return random_domain_specs(
        cfg.n_domains, seed=int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]),
        samples_per_class=cfg.samples_per_class, noise_std=cfg.noise_std, jitter=cfg.jitter,
        class_seed=cfg.class_seed, shift_scale=cfg.shift_scale, channels=model_cfg.channels,
    )


def warmup_pool(cfg: DatasetConfig, model_cfg: ModelConfig, seed: int) -> DomainDataset:
    """Extra domains (same classes, fresh colour transforms) for backbone pretraining."""
    specs = random_domain_specs(
        cfg.warmup_domains, seed=int(np.random.SeedSequence([seed, 2]).generate_state(1)[0]),
        samples_per_class=cfg.warmup_samples_per_class, noise_std=cfg.noise_std, jitter=cfg.jitter,
        class_seed=cfg.class_seed, shift_scale=cfg.shift_scale, channels=model_cfg.channels,
        first_id=1000,
    )
    parts = [generate_domain(s, seed + 1, model_cfg) for s in specs]
    return DomainDataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), -1
    )


def zero_shot_accuracy(backbone: BackboneParams, ds: DomainDataset, batch: int = 256) -> float:
    if len(ds) == 0:
        raise DataError("empty dataset")
    hits = 0
    for start in range(0, len(ds), batch):
        p = zero_shot_distribution(backbone, ds.images[start:start + batch])
        hits += int((p.argmax(axis=1) == ds.labels[start:start + batch]).sum())
    return hits / len(ds)


def warmup_backbone(
    backbone: BackboneParams,
    pool: DomainDataset,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
    check_sets: list[DomainDataset] | None = None,
    threshold: float | None = None,
) -> BackboneParams:
    """Pretrain every backbone weight on prompt-free classification, then freeze.

    Adam on the contrastive classification loss stands in for large-scale
    pretraining.  With ``check_sets``, zero-shot accuracy on each set must
    exceed ``threshold`` (default 1.5/C) or :class:`WarmupError` is raised.
    """
    trained = backbone.copy()
    if steps <= 0:
        return trained.freeze()
    if len(pool) == 0:
        raise DataError("warmup pool is empty")
    rng = np.random.default_rng([seed, 99])
    params = list(trained.unfreeze().tensors.values())
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    while step < steps:
        for idx in minibatches(len(pool), batch_size, rng):
            if step >= steps:
                break
            with tn.Tape() as tape:
                loss = cross_entropy(predict(trained, None, pool.images[idx]), pool.labels[idx])
            tn.backward(loss, tape)
            step += 1
            for i, p in enumerate(params):
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mhat = m[i] / (1 - b1**step)
                vhat = v[i] / (1 - b2**step)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
                p.grad = None
    trained.freeze()
    if check_sets:
        check_zero_shot(trained, check_sets, threshold, steps)
    return trained


def check_zero_shot(
    backbone: BackboneParams, datasets: list[DomainDataset], threshold: float | None = None,
    steps: int | None = None,
) -> None:
    """Raise :class:`WarmupError` unless zero-shot accuracy beats ``threshold`` (default 1.5/C) everywhere."""
    limit = threshold if threshold is not None else 1.5 / backbone.config.n_classes
    for ds in datasets:
        acc = zero_shot_accuracy(backbone, ds)
        if acc <= limit:
            after = f" after {steps} warmup steps" if steps is not None else ""
            raise WarmupError(
                f"zero-shot accuracy {acc:.3f} on domain {ds.domain_id} does not exceed "
                f"{limit:.3f}{after}; increase warmup_steps"
            )


def export_datasets(path, datasets: list[DomainDataset], meta: dict | None = None) -> int:
    """Write domains as named tensors (``domain{id}.images`` / ``domain{id}.labels``)."""
    from .codec import save_checkpoint

    tensors = {}
    for ds in datasets:
        tensors[f"domain{ds.domain_id}.images"] = ds.images
        tensors[f"domain{ds.domain_id}.labels"] = ds.labels.astype(np.float64)
    info = dict(meta or {})
    info.update(kind="dataset", domains=[ds.domain_id for ds in datasets])
    return save_checkpoint(path, tensors, info)


def import_datasets(path) -> tuple[dict, list[DomainDataset]]:
    from .codec import load_checkpoint

    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "dataset":
        raise DataError(f"{path} does not hold a dataset")
    out = []
    for d in meta["domains"]:
        try:
            images = tensors[f"domain{d}.images"]
            labels = tensors[f"domain{d}.labels"].astype(np.int64)
        except KeyError as exc:
            raise DataError(f"{path}: missing tensor {exc}") from None
        out.append(DomainDataset(images, labels, int(d)))
    return meta, out
