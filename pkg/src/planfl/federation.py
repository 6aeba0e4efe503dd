"""Two-stage federated rounds, payload accounting and experiment driver.

Every message between the server and a client is encoded into a wire frame
and decoded on the receiving side, so the byte counts recorded by
:class:`Transport` are exactly what a socket transport would carry.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import codec
from . import tensor as tn
from .aggregation import (
    AggregatorParams,
    aggregate_promptset,
    fedavg_aggregators,
    gamma_entropy,
    init_aggregators,
    train_aggregators_locally,
)
from .codec import MsgType
from .config import ExperimentConfig
from .dataset import (
    ClientSplit,
    DomainDataset,
    experiment_domains,
    generate_domain,
    leave_one_out,
    warmup_backbone,
    check_zero_shot,
    warmup_pool,
    zero_shot_accuracy,
)
from .encoder import (
    BackboneParams,
    PromptSet,
    content_hash,
    init_backbone,
    init_prompts,
    predict,
    template_tokens,
    text_forward,
    vision_forward,
)
from .errors import ConfigError, DataError, ProtocolError
from .local_training import LocalStepReport, local_prompt_round
from .tensor import Tensor

log = logging.getLogger(__name__)

Hook = Callable[..., None]


def measure_payload(obj) -> int:
    """Σ numel · 8 over every tensor of a PromptSet / AggregatorParams / tensor dict."""
    if obj is None:
        return 0
    tensors = obj.tensors() if hasattr(obj, "tensors") else obj
    return codec.data_bytes(tensors)


@dataclass
class ClientState:
    client_id: int
    data: ClientSplit
    prompts: PromptSet | None = None
    agg_text: AggregatorParams | None = None
    agg_vis: AggregatorParams | None = None
    seed: int = 0

    def rng(self, round_index: int, stage: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.client_id, round_index, stage])


@dataclass
class GlobalState:
    prompts: PromptSet
    agg_text: AggregatorParams | None
    agg_vis: AggregatorParams | None
    round: int = 0

    def content_hash(self) -> str:
        tensors = dict(self.prompts.tensors())
        for agg in (self.agg_text, self.agg_vis):
            if agg is not None:
                tensors.update(agg.tensors())
        return content_hash(tensors, extra=str(self.round))


@dataclass
class RoundMetrics:
    round: int
    stage1: list[dict] = field(default_factory=list)
    stage2_ce: list[float] = field(default_factory=list)
    gamma_entropy: dict[str, list[float]] = field(default_factory=dict)
    bytes_down_stage1: int = 0
    bytes_up_stage1: int = 0
    bytes_down_stage2: int = 0
    bytes_up_stage2: int = 0
    frame_bytes: int = 0
    target_accuracy: float | None = None
    wall_time: float = 0.0

    @property
    def mean_stage1_ce(self) -> float:
        return float(np.mean([c["ce"] for c in self.stage1]))

    @property
    def bytes_total(self) -> int:
        return self.bytes_down_stage1 + self.bytes_up_stage1 + self.bytes_down_stage2 + self.bytes_up_stage2

    def to_record(self) -> dict:
        """Deterministic part of the metrics (wall time is reported separately)."""
        rec = dataclasses.asdict(self)
        rec.pop("wall_time")
        return rec


@dataclass
class FrameRecord:
    round: int
    stage: int
    direction: str
    client: int
    msg_type: MsgType
    names: tuple[str, ...]
    payload_bytes: int
    frame_bytes: int


class Transport:
    """In-process transport: encode, account, decode."""

    def __init__(self, keep_frames: bool = False):
        self.records: list[FrameRecord] = []
        self.frames: list[bytes] = []
        self.keep_frames = keep_frames

    def send(self, round_index: int, stage: int, direction: str, client: int,
             msg_type: MsgType, tensors: dict) -> dict[str, np.ndarray]:
        frame = codec.encode(msg_type, tensors)
        kind, out = codec.decode(frame)
        if kind != msg_type:
            raise ProtocolError(f"frame type {kind} != {msg_type}")
        self.records.append(FrameRecord(
            round_index, stage, direction, client, kind, tuple(out), codec.data_bytes(out), len(frame)
        ))
        if self.keep_frames:
            self.frames.append(frame)
        return out

    def payload(self, round_index: int, stage: int, direction: str) -> int:
        return sum(r.payload_bytes for r in self.records
                   if r.round == round_index and r.stage == stage and r.direction == direction)

    def frame_total(self, round_index: int) -> int:
        return sum(r.frame_bytes for r in self.records if r.round == round_index)


def _prefixed(tensors: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in tensors.items()}


def _aggregator_tensors(agg_t, agg_v) -> dict:
    out = {}
    for agg in (agg_t, agg_v):
        if agg is not None:
            out.update(agg.tensors())
    return out


def _mean_report(reports: list[LocalStepReport]) -> dict:
    w = np.array([r.samples for r in reports], dtype=np.float64)
    def avg(attr):
        return float(np.dot(w, [getattr(r, attr) for r in reports]) / w.sum())
    return {"ce": avg("ce_loss"), "kl": avg("kl_loss"), "total": avg("total_loss"),
            "steps": len(reports), "kl_clamped": any(r.kl_clamped for r in reports)}


def _noop(event: str, **info) -> None:
    return None


def run_round(
    state: GlobalState,
    clients: list[ClientState],
    backbone: BackboneParams,
    cfg: ExperimentConfig,
    transport: Transport | None = None,
    hook: Hook | None = None,
) -> tuple[GlobalState, RoundMetrics]:
    """One federated round.  ``state`` and ``clients`` are only replaced on success."""
    hook = hook or _noop
    transport = transport or Transport()
    if not clients:
        raise ProtocolError("a round needs at least one client")
    r = state.round + 1
    t0 = time.perf_counter()
    ab = cfg.ablations
    plan = cfg.method == "plan"
    k = len(clients)
    metrics = RoundMetrics(round=r)

    # stage 1: reference-based prompt learning
    if plan:
        zero_shot = r == 1 and not ab.disable_zsi
        alpha = 0.0 if ab.disable_kl or (r == 1 and ab.disable_zsi) else cfg.train.alpha
    else:
        zero_shot, alpha = False, 0.0
    mode = "zero_shot" if zero_shot else "global_prompts"
    down = state.prompts.tensors()
    received = [transport.send(r, 1, "down", c.client_id, MsgType.GLOBAL_PROMPTS, down) for c in clients]
    hook("stage1_broadcast", round=r)
    uploads = []
    for client, msg in zip(clients, received):
        gp = PromptSet.from_tensors(msg)
        new_prompts, reports = local_prompt_round(
            client.data.train, backbone, gp, mode, cfg.train, client.rng(r, 1), alpha=alpha
        )
        metrics.stage1.append(_mean_report(reports))
        uploads.append(transport.send(r, 1, "up", client.client_id, MsgType.LOCAL_PROMPTS, new_prompts.tensors()))
    local_sets = [PromptSet.from_tensors(u) for u in uploads]
    hook("stage1_uploaded", round=r, local_prompts=local_sets)

    # stage 2: attention-based aggregation (skipped when both modalities are averaged)
    use_t = plan and not ab.avg_text_agg
    use_v = plan and not ab.avg_vis_agg
    agg_t = state.agg_text if use_t else None
    agg_v = state.agg_vis if use_v else None
    client_aggs = []
    if use_t or use_v:
        bcast = {}
        for j, ps in enumerate(local_sets):
            bcast.update(_prefixed(ps.tensors(), f"client{j}."))
        bcast.update(_aggregator_tensors(agg_t, agg_v))
        received2 = [transport.send(r, 2, "down", c.client_id, MsgType.STAGE2_BROADCAST, bcast) for c in clients]
        client_views = []
        for msg in received2:
            sets = [PromptSet.from_tensors(msg, prefix=f"client{j}.") for j in range(k)]
            at = AggregatorParams.from_tensors(msg, "text", cfg.agg_ratio) if use_t else None
            av = AggregatorParams.from_tensors(msg, "visual", cfg.agg_ratio) if use_v else None
            client_views.append((sets, at, av))
        hook("stage2_broadcast", round=r, views=client_views)
        ups = []
        for client, (sets, at, av) in zip(clients, client_views):
            new_t, new_v, reports = train_aggregators_locally(
                client.data.train, backbone, sets, at, av, cfg.train, client.rng(r, 2)
            )
            metrics.stage2_ce.append(_mean_report(reports)["ce"])
            client_aggs.append((new_t, new_v))
            ups.append(transport.send(r, 2, "up", client.client_id, MsgType.AGGREGATORS,
                                      _aggregator_tensors(new_t, new_v)))
        hook("stage2_trained", round=r, views=client_views)
        agg_t = fedavg_aggregators([AggregatorParams.from_tensors(u, "text", cfg.agg_ratio) for u in ups]) if use_t else None
        agg_v = fedavg_aggregators([AggregatorParams.from_tensors(u, "visual", cfg.agg_ratio) for u in ups]) if use_v else None

    with tn.no_tape():
        new_prompts, gammas = aggregate_promptset(local_sets, agg_t, agg_v, return_gammas=True)
    new_prompts = new_prompts.copy()
    metrics.gamma_entropy = {kind: [gamma_entropy(g) for g in gs] for kind, gs in gammas.items()}
    metrics.bytes_down_stage1 = transport.payload(r, 1, "down")
    metrics.bytes_up_stage1 = transport.payload(r, 1, "up")
    metrics.bytes_down_stage2 = transport.payload(r, 2, "down")
    metrics.bytes_up_stage2 = transport.payload(r, 2, "up")
    metrics.frame_bytes = transport.frame_total(r)
    hook("server_aggregated", round=r)

    new_state = GlobalState(
        new_prompts,
        agg_t if use_t else state.agg_text,
        agg_v if use_v else state.agg_vis,
        r,
    )
    # commit client-side state only once the round has fully succeeded
    for i, client in enumerate(clients):
        client.prompts = local_sets[i]
        if client_aggs:
            client.agg_text, client.agg_vis = client_aggs[i]
    metrics.wall_time = time.perf_counter() - t0
    return new_state, metrics


def expected_payloads(prompt_payload: int, agg_payload: int, k: int, two_stage: bool = True) -> dict[str, int]:
    """Analytic per-round byte counts for K clients."""
    return {
        "bytes_down_stage1": k * prompt_payload,
        "bytes_up_stage1": k * prompt_payload,
        "bytes_down_stage2": k * (k * prompt_payload + agg_payload) if two_stage else 0,
        "bytes_up_stage2": k * agg_payload if two_stage else 0,
    }


def evaluate(state: GlobalState, backbone: BackboneParams, dataset: DomainDataset, batch: int = 200) -> float:
    """Top-1 accuracy of the global prompts; ties go to the lowest class index."""
    if len(dataset) == 0:
        raise DataError("target dataset is empty")
    hits = 0
    with tn.no_tape():
        w = text_forward(backbone, state.prompts.text, template_tokens(backbone.config))
        for start in range(0, len(dataset), batch):
            f = vision_forward(backbone, state.prompts.visual, dataset.images[start:start + batch])
            logits = f.data @ w.data.T
            hits += int((logits.argmax(axis=1) == dataset.labels[start:start + batch]).sum())
    return hits / len(dataset)


def target_features(state: GlobalState, backbone: BackboneParams, dataset: DomainDataset, batch: int = 200) -> np.ndarray:
    with tn.no_tape():
        parts = [vision_forward(backbone, state.prompts.visual, dataset.images[s:s + batch]).data
                 for s in range(0, len(dataset), batch)]
    return np.concatenate(parts)


# ---------------------------------------------------------------- experiment driver

_WARMUP_CACHE: dict[str, BackboneParams] = {}


def build_backbone(cfg: ExperimentConfig, check_sets: list[DomainDataset] | None = None) -> BackboneParams:
    """Seeded init plus warmup, memoized per (model, data, backbone_seed).

    The backbone plays the role of a fixed pretrained model, so its seed is
    independent of the experiment seed.  ``check_sets`` are verified on every
    call because they depend on the experiment.
    """
    key = json.dumps([cfg.model.to_dict(), dataclasses.asdict(cfg.data), cfg.backbone_seed], sort_keys=True)
    if key not in _WARMUP_CACHE:
        backbone = init_backbone(cfg.model, cfg.backbone_seed)
        steps = cfg.data.warmup_steps
        pool = warmup_pool(cfg.data, cfg.model, cfg.backbone_seed) if steps else None
        _WARMUP_CACHE[key] = warmup_backbone(
            backbone, pool, steps, lr=cfg.data.warmup_lr, batch_size=cfg.data.warmup_batch,
            seed=cfg.backbone_seed,
        )
    backbone = _WARMUP_CACHE[key].copy()
    if check_sets and cfg.warmup_check and cfg.data.warmup_steps:
        check_zero_shot(backbone, check_sets)
    return backbone


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    state: GlobalState
    backbone: BackboneParams
    clients: list[ClientState]
    target: DomainDataset
    transport: Transport
    report: dict


def setup_experiment(cfg: ExperimentConfig):
    problems = cfg.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    specs = experiment_domains(cfg.data, cfg.model, cfg.seed)
    splits, target = leave_one_out(specs, cfg.held_out, cfg.seed, cfg.model, cfg.data.val_fraction)
    all_domains = [generate_domain(s, cfg.seed, cfg.model) for s in specs]
    backbone = build_backbone(cfg, check_sets=all_domains)
    clients = [ClientState(i, split, seed=cfg.seed) for i, split in enumerate(splits)]
    seeds = np.random.SeedSequence([cfg.seed, 3]).generate_state(2)
    prompts = init_prompts(cfg.model, int(seeds[0]), cfg.prompt_init_std)
    agg_t, agg_v = init_aggregators(cfg.model, int(seeds[1]), cfg.agg_ratio)
    if cfg.method != "plan":
        agg_t = agg_v = None
    return backbone, clients, target, GlobalState(prompts, agg_t, agg_v, 0)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    hook: Hook | None = None,
    transport: Transport | None = None,
) -> ExperimentResult:
    """Run all rounds, evaluating the held-out domain after each one."""
    started = time.perf_counter()
    backbone, clients, target, state = setup_experiment(cfg)
    backbone_hash = backbone.content_hash()
    transport = transport or Transport()
    out = Path(out_dir) if out_dir is not None else None
    stream = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
             "layout": {"metrics": "metrics.jsonl", "summary": "summary.csv",
                        "checkpoints": "checkpoints/"}},
            indent=2, sort_keys=True))
        stream = (out / "metrics.jsonl").open("w")
    zero_shot_target = zero_shot_accuracy(backbone, target)
    metrics: list[RoundMetrics] = []
    try:
        for _ in range(cfg.rounds):
            state, m = run_round(state, clients, backbone, cfg, transport, hook)
            m.target_accuracy = evaluate(state, backbone, target)
            metrics.append(m)
            log.info("round %d: target acc %.4f, stage-1 CE %.4f", m.round, m.target_accuracy, m.mean_stage1_ce)
            if stream is not None:
                stream.write(json.dumps(m.to_record(), sort_keys=True) + "\n")
                stream.flush()
    finally:
        if stream is not None:
            stream.close()
    if backbone.content_hash() != backbone_hash:
        raise RuntimeError("backbone changed during training")
    report = {
        "method": cfg.method,
        "rounds": len(metrics),
        "held_out": cfg.held_out,
        "final_accuracy": metrics[-1].target_accuracy,
        "accuracy_per_round": [m.target_accuracy for m in metrics],
        "zero_shot_target_accuracy": zero_shot_target,
        "bytes_total": int(sum(m.bytes_total for m in metrics)),
        "wall_time": time.perf_counter() - started,
        "backbone_hash": backbone_hash,
    }
    if out is not None:
        write_outputs(out, cfg, state, backbone, target, metrics, report)
    return ExperimentResult(cfg, metrics, state, backbone, clients, target, transport, report)


def checkpoint_meta(cfg: ExperimentConfig, kind: str, round_index: int) -> dict:
    return {"kind": kind, "config": cfg.to_dict(), "round": round_index}


def write_outputs(out: Path, cfg, state: GlobalState, backbone, target, metrics, report) -> None:
    ck = out / "checkpoints"
    codec.save_checkpoint(ck / "backbone.plnc", backbone.tensors, checkpoint_meta(cfg, "backbone", state.round))
    codec.save_checkpoint(ck / "global_prompts.plnc", state.prompts.tensors(),
                          checkpoint_meta(cfg, "global_prompts", state.round))
    aggs = _aggregator_tensors(state.agg_text, state.agg_vis)
    codec.save_checkpoint(ck / "aggregators.plnc", aggs, checkpoint_meta(cfg, "aggregators", state.round))
    if cfg.dump_features:
        feats = target_features(state, backbone, target)
        codec.save_checkpoint(out / "target_features.plnc",
                              {"features": feats, "labels": target.labels.astype(np.float64)},
                              checkpoint_meta(cfg, "features", state.round))
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        # timing stays in report.json so this file is reproducible
        writer.writerow(["round", "target_accuracy", "mean_stage1_ce", "bytes_total"])
        for m in metrics:
            writer.writerow([m.round, m.target_accuracy, m.mean_stage1_ce, m.bytes_total])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))


def output_root() -> Path:
    return Path(os.environ.get("PLANFL_OUTPUT_ROOT", "runs"))
