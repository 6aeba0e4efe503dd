"""Stage 2: attention-based fusion of client prompts into global prompts.

Each prompt block of each modality has its own aggregator: a query vector
``q``, a scoring MLP ``F_q`` and a mapping MLP ``F_a``.  Both MLPs are
two-layer bottlenecks (GELU hidden layer, linear output).  ``F_a`` also
carries an identity skip so a freshly initialized aggregator returns
approximately the weighted mean of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import BackboneParams, PromptSet, content_hash, predict
from .errors import ConfigError, DataError, ProtocolError
from .local_training import (
    LocalStepReport,
    TrainConfig,
    cross_entropy,
    minibatches,
    sgd_step,
)
from .tensor import Tensor

BLOCK_KEYS = ("q", "fq.w1", "fq.b1", "fq.w2", "fq.b2", "fa.w1", "fa.b1", "fa.w2", "fa.b2")
MODALITIES = ("text", "visual")


def hidden_width(m: int, d: int, ratio: float) -> int:
    return max(1, math.ceil(m * d * ratio)) if m * d else 0


@dataclass
class AggregatorParams:
    """Aggregators for every prompt block of one modality."""

    modality: str
    blocks: list[dict[str, Tensor]] = field(default_factory=list)
    ratio: float = 0.125

    def tensors(self) -> dict[str, Tensor]:
        return {
            f"agg.{self.modality}.{l}.{k}": t
            for l, blk in enumerate(self.blocks)
            for k, t in blk.items()
        }

    def parameters(self) -> list[Tensor]:
        return [blk[k] for blk in self.blocks for k in BLOCK_KEYS]

    def copy(self, requires_grad: bool = False) -> "AggregatorParams":
        return AggregatorParams(
            self.modality,
            [{k: Tensor(t.data.copy(), requires_grad) for k, t in blk.items()} for blk in self.blocks],
            self.ratio,
        )

    def set_requires_grad(self, flag: bool) -> "AggregatorParams":
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None
        return self

    def topology(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, t.shape) for k, t in self.tensors().items()]

    def content_hash(self) -> str:
        return content_hash(self.tensors())

    @classmethod
    def from_tensors(cls, tensors: dict, modality: str, ratio: float = 0.125) -> "AggregatorParams":
        blocks = []
        while f"agg.{modality}.{len(blocks)}.q" in tensors:
            l = len(blocks)
            blk = {}
            for k in BLOCK_KEYS:
                arr = tensors[f"agg.{modality}.{l}.{k}"]
                blk[k] = Tensor(arr.data.copy() if isinstance(arr, Tensor) else arr)
            blocks.append(blk)
        return cls(modality, blocks, ratio)


def init_aggregator(
    modality: str, n_blocks: int, m: int, d: int, seed: int,
    ratio: float = 0.125, fa_out_std: float = 1e-3, q_std: float = 0.02,
) -> AggregatorParams:
    """Random query and ``F_q``; ``F_a`` output layer near zero so ``F_a`` ≈ identity."""
    rng = np.random.default_rng(seed)
    n_in = m * d
    h = hidden_width(m, d, ratio)
    blocks = []
    for _ in range(n_blocks):
        w1_std = 1.0 / math.sqrt(max(n_in, 1))
        w2_std = 1.0 / math.sqrt(max(h, 1))
        blocks.append({
            "q": Tensor(rng.normal(0.0, q_std, h)),
            "fq.w1": Tensor(rng.normal(0.0, w1_std, (n_in, h))),
            "fq.b1": Tensor(np.zeros(h)),
            "fq.w2": Tensor(rng.normal(0.0, w2_std, (h, h))),
            "fq.b2": Tensor(np.zeros(h)),
            "fa.w1": Tensor(rng.normal(0.0, w1_std, (n_in, h))),
            "fa.b1": Tensor(np.zeros(h)),
            "fa.w2": Tensor(rng.normal(0.0, fa_out_std, (h, n_in))),
            "fa.b2": Tensor(np.zeros(n_in)),
        })
    return AggregatorParams(modality, blocks, ratio)


def init_aggregators(model_cfg, seed: int, ratio: float = 0.125) -> tuple[AggregatorParams, AggregatorParams]:
    ss = np.random.SeedSequence(seed).spawn(2)
    n = model_cfg.prompt_blocks
    agg_t = init_aggregator("text", n, model_cfg.m_text, model_cfg.d_text,
                            int(ss[0].generate_state(1)[0]), ratio)
    agg_v = init_aggregator("visual", n, model_cfg.m_vis, model_cfg.d_vis,
                            int(ss[1].generate_state(1)[0]), ratio)
    return agg_t, agg_v


def _stack_flat(local_prompts) -> Tensor:
    mats = [p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in local_prompts]
    if not mats:
        raise ConfigError("need at least one local prompt")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape:
            raise ConfigError(f"local prompt shapes differ: {shape} vs {m.shape}")
    return Tensor(np.stack([m.reshape(-1) for m in mats]))


def _mlp(x: Tensor, blk: dict[str, Tensor], prefix: str) -> Tensor:
    h = tn.gelu(tn.linear(x, blk[f"{prefix}.w1"], blk[f"{prefix}.b1"]))
    return tn.linear(h, blk[f"{prefix}.w2"], blk[f"{prefix}.b2"])


def map_prompts(flat: Tensor, blk: dict[str, Tensor]) -> Tensor:
    """F_a applied row-wise to flattened prompts (identity skip + bottleneck MLP)."""
    return tn.add(flat, _mlp(flat, blk, "fa"))


def attention_weights(local_prompts, blk: dict[str, Tensor]) -> Tensor:
    """gamma_k = softmax_k(<q, F_q(flatten(P_k))>), one weight per client."""
    flat = _stack_flat(local_prompts)
    if flat.shape[1] != blk["fq.w1"].shape[0]:
        raise ConfigError(
            f"flattened prompt width {flat.shape[1]} != aggregator input {blk['fq.w1'].shape[0]}"
        )
    keys = _mlp(flat, blk, "fq")
    scores = tn.matmul(keys, tn.reshape(blk["q"], (blk["q"].shape[0], 1)))
    return tn.softmax(tn.reshape(scores, (flat.shape[0],)), axis=0)


def aggregate(local_prompts, gamma, blk: dict[str, Tensor]) -> Tensor:
    """sum_k gamma_k · F_a(flatten(P_k)), reshaped to the prompt shape."""
    first = local_prompts[0]
    shape = first.shape
    flat = _stack_flat(local_prompts)
    gamma = tn.as_tensor(gamma)
    if gamma.shape != (flat.shape[0],):
        raise ConfigError(f"gamma shape {gamma.shape} does not match {flat.shape[0]} prompts")
    # map each client on its own so F_a(T^k) is bitwise the same as a standalone call
    mapped = tn.concat([map_prompts(tn.getitem(flat, slice(k, k + 1)), blk) for k in range(flat.shape[0])], axis=0)
    fused = tn.matmul(tn.reshape(gamma, (1, flat.shape[0])), mapped)
    return tn.reshape(fused, shape)


def average_prompts(local_prompts) -> Tensor:
    """Equal-weight mean of raw prompts (the fixed-weight averaging path)."""
    mats = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in local_prompts]
    total = mats[0].copy()
    for m in mats[1:]:
        total = total + m
    return Tensor(total / len(mats))


def aggregate_promptset(
    all_local: list[PromptSet],
    agg_text: AggregatorParams | None,
    agg_vis: AggregatorParams | None,
    return_gammas: bool = False,
):
    """Fuse K client prompt sets block by block; ``None`` aggregator = plain average."""
    if not all_local:
        raise ProtocolError("no local prompt sets to aggregate")
    n_text = {len(p.text) for p in all_local}
    n_vis = {len(p.visual) for p in all_local}
    if len(n_text) != 1 or len(n_vis) != 1:
        raise ProtocolError("clients disagree on the number of prompt blocks")
    gammas: dict[str, list[np.ndarray]] = {"text": [], "visual": []}

    def fuse(kind: str, agg: AggregatorParams | None) -> list[Tensor]:
        out = []
        n_blocks = len(getattr(all_local[0], kind))
        if agg is not None and len(agg.blocks) != n_blocks:
            raise ProtocolError(f"{kind} aggregator has {len(agg.blocks)} blocks, prompts have {n_blocks}")
        for l in range(n_blocks):
            locals_l = [getattr(p, kind)[l] for p in all_local]
            if agg is None:
                out.append(average_prompts(locals_l))
                gammas[kind].append(np.full(len(locals_l), 1.0 / len(locals_l)))
                continue
            blk = agg.blocks[l]
            gamma = attention_weights(locals_l, blk)
            out.append(aggregate(locals_l, gamma, blk))
            gammas[kind].append(gamma.data.copy())
        return out

    result = PromptSet(fuse("text", agg_text), fuse("visual", agg_vis))
    return (result, gammas) if return_gammas else result


def train_aggregators_locally(
    dataset,
    backbone: BackboneParams,
    all_local: list[PromptSet],
    agg_text: AggregatorParams | None,
    agg_vis: AggregatorParams | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[AggregatorParams | None, AggregatorParams | None, list[LocalStepReport]]:
    """SGD on the classification loss of the aggregated global prompts.

    Local prompts and backbone stay frozen; only aggregator copies change.
    A ``None`` aggregator means that modality is averaged and not trained.
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise DataError("client dataset is empty")
    frozen = [p.copy(requires_grad=False) for p in all_local]
    a_t = None if agg_text is None else agg_text.copy(requires_grad=True)
    a_v = None if agg_vis is None else agg_vis.copy(requires_grad=True)
    params = [*(a_t.parameters() if a_t else []), *(a_v.parameters() if a_v else [])]
    reports = []
    for _ in range(cfg.local_epochs):
        for idx in minibatches(len(labels), cfg.batch_size, rng):
            with tn.Tape() as tape:
                global_prompts = aggregate_promptset(frozen, a_t, a_v)
                ce = cross_entropy(predict(backbone, global_prompts, images[idx]), labels[idx])
            tn.backward(ce, tape)
            sgd_step(params, cfg.aggregator_lr)
            reports.append(LocalStepReport(ce.item(), 0.0, ce.item(), len(idx)))
    if a_t is not None:
        a_t.set_requires_grad(False)
    if a_v is not None:
        a_v.set_requires_grad(False)
    return a_t, a_v, reports


def fedavg_aggregators(local_aggs: list[AggregatorParams]) -> AggregatorParams:
    """Elementwise mean of every parameter, summed in client order."""
    if not local_aggs:
        raise ProtocolError("fedavg needs at least one aggregator")
    ref = local_aggs[0]
    topo = ref.topology()
    for a in local_aggs[1:]:
        if a.topology() != topo or a.modality != ref.modality:
            raise ProtocolError("aggregator topologies differ; cannot average")
    k = len(local_aggs)
    blocks = []
    for l, blk in enumerate(ref.blocks):
        out = {}
        for name in blk:
            total = local_aggs[0].blocks[l][name].data.copy()
            for a in local_aggs[1:]:
                total = total + a.blocks[l][name].data
            out[name] = Tensor(total / k)
        blocks.append(out)
    return AggregatorParams(ref.modality, blocks, ref.ratio)


def gamma_entropy(gamma: np.ndarray) -> float:
    g = np.asarray(gamma)
    nz = g[g > 0]
    return float(-(nz * np.log(nz)).sum())
