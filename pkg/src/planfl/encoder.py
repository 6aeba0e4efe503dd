"""Frozen dual-encoder backbone with deep per-block prompt injection.

Text blocks see the sequence ``[cls], T_l, E_l`` and vision blocks see
``[cls], V_l, P_l``.  After each block the outputs at prompt positions are
dropped and the next block receives fresh prompts, while the class token and
the content tokens carry over.  Blocks past the configured prompt depth run
without prompts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .tensor import Tensor

BLOCK_PARAMS = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    d_text: int = 32
    d_vis: int = 48
    d_proj: int = 32
    n_heads: int = 4
    m_text: int = 4
    m_vis: int = 4
    n_classes: int = 4
    vocab_size: int = 0  # 0 -> n_classes + 2
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    tau: float = 0.07
    prompt_depth: int = 0  # 0 -> depth
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.depth < 1:
            out.append("depth must be >= 1")
        if self.m_text < 0 or self.m_vis < 0:
            out.append("prompt lengths must be >= 0")
        if self.n_classes < 2:
            out.append("n_classes must be >= 2")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.tau > 0:
            out.append("tau must be positive")
        for name in ("d_text", "d_vis"):
            width = getattr(self, name)
            if self.n_heads < 1 or width % self.n_heads:
                out.append(f"{name}={width} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.prompt_depth <= self.depth:
            out.append("prompt_depth must lie in [0, depth]")
        if self.vocab_size and self.vocab_size < self.n_classes + 1:
            out.append("vocab_size must hold a template token plus one token per class")
        return out

    @property
    def vocab(self) -> int:
        return self.vocab_size or self.n_classes + 2

    @property
    def prompt_blocks(self) -> int:
        return self.prompt_depth or self.depth

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def max_text_len(self) -> int:
        return 3

    def to_dict(self) -> dict:
        return asdict(self)


def template_tokens(cfg: ModelConfig) -> list[list[int]]:
    """Per-class description ``[template, class]`` from the toy vocabulary.

    Token 0 stands for the "a photo of a" template; token ``c + 1`` names class c.
    """
    return [[0, c + 1] for c in range(cfg.n_classes)]


@dataclass
class BackboneParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    @property
    def tau(self) -> float:
        return self.config.tau

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def block(self, tower: str, l: int) -> dict[str, Tensor]:
        prefix = f"{tower}.blocks.{l}."
        return {k: self.tensors[prefix + k] for k in BLOCK_PARAMS}

    def freeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.freeze()
        return self

    def unfreeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def content_hash(self) -> str:
        return content_hash(self.tensors, extra=json.dumps(self.config.to_dict(), sort_keys=True))


def content_hash(tensors: dict[str, Tensor | np.ndarray], extra: str = "") -> str:
    h = hashlib.sha256(extra.encode())
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _block_shapes(d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    h = d * ratio
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.wq": (d, d), "attn.bq": (d,), "attn.wk": (d, d), "attn.bk": (d,),
        "attn.wv": (d, d), "attn.bv": (d,), "attn.wo": (d, d), "attn.bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.w1": (d, h), "mlp.b1": (h,), "mlp.w2": (h, d), "mlp.b2": (d,),
    }


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "text.tok_emb": (cfg.vocab, cfg.d_text),
        "text.pos": (cfg.max_text_len + 1, cfg.d_text),
        "text.cls": (cfg.d_text,),
        "text.proj": (cfg.d_text, cfg.d_proj),
        "vis.patch_w": (cfg.patch_dim, cfg.d_vis),
        "vis.patch_b": (cfg.d_vis,),
        "vis.pos": (cfg.n_patches + 1, cfg.d_vis),
        "vis.cls": (cfg.d_vis,),
        "vis.proj": (cfg.d_vis, cfg.d_proj),
    }
    for tower, d in (("text", cfg.d_text), ("vis", cfg.d_vis)):
        for l in range(cfg.depth):
            for k, s in _block_shapes(d, cfg.mlp_ratio).items():
                shapes[f"{tower}.blocks.{l}.{k}"] = s
    return shapes


def init_backbone(cfg: ModelConfig, seed: int) -> BackboneParams:
    """Seeded Gaussian init (std ``cfg.init_std``); layer norms start at identity."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in backbone_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif leaf.startswith("b") or name.endswith("patch_b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor(data)
    return BackboneParams(cfg, tensors)


@dataclass
class PromptSet:
    """Per-block learnable prompts: ``text[l]`` is m_t×d_text, ``visual[l]`` is m_v×d_vis."""

    text: list[Tensor] = field(default_factory=list)
    visual: list[Tensor] = field(default_factory=list)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"text.{l}": t for l, t in enumerate(self.text)}
        out.update({f"visual.{l}": v for l, v in enumerate(self.visual)})
        return out

    def parameters(self) -> list[Tensor]:
        return [*self.text, *self.visual]

    def set_requires_grad(self, flag: bool) -> "PromptSet":
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None
        return self

    def copy(self, requires_grad: bool = False) -> "PromptSet":
        return PromptSet(
            [Tensor(t.data.copy(), requires_grad) for t in self.text],
            [Tensor(v.data.copy(), requires_grad) for v in self.visual],
        )

    def content_hash(self) -> str:
        return content_hash(self.tensors())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray | Tensor], prefix: str = "") -> "PromptSet":
        def collect(kind):
            out = []
            while f"{prefix}{kind}.{len(out)}" in tensors:
                arr = tensors[f"{prefix}{kind}.{len(out)}"]
                out.append(Tensor(arr.data.copy() if isinstance(arr, Tensor) else arr))
            return out

        return cls(collect("text"), collect("visual"))


def init_prompts(cfg: ModelConfig, seed: int, std: float = 0.02) -> PromptSet:
    rng = np.random.default_rng(seed)
    n = cfg.prompt_blocks
    text = [Tensor(rng.normal(0.0, std, (cfg.m_text, cfg.d_text))) for _ in range(n)]
    visual = [Tensor(rng.normal(0.0, std, (cfg.m_vis, cfg.d_vis))) for _ in range(n)]
    return PromptSet(text, visual)


def check_prompts(cfg: ModelConfig, prompts: PromptSet) -> None:
    n = cfg.prompt_blocks
    if len(prompts.text) != n or len(prompts.visual) != n:
        raise ConfigError(
            f"expected {n} prompt blocks per modality, got {len(prompts.text)} text / "
            f"{len(prompts.visual)} visual"
        )
    for t in prompts.text:
        if t.shape != (cfg.m_text, cfg.d_text):
            raise ConfigError(f"text prompt shape {t.shape} != {(cfg.m_text, cfg.d_text)}")
    for v in prompts.visual:
        if v.shape != (cfg.m_vis, cfg.d_vis):
            raise ConfigError(f"visual prompt shape {v.shape} != {(cfg.m_vis, cfg.d_vis)}")


# ---------------------------------------------------------------- forwards


def transformer_block(x: Tensor, p: dict[str, Tensor], n_heads: int) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)) with GELU."""
    h = tn.layer_norm(x, p["ln1.g"], p["ln1.b"])
    attn = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    x = tn.add(x, tn.multihead_attention(h, attn, n_heads))
    h = tn.layer_norm(x, p["ln2.g"], p["ln2.b"])
    h = tn.linear(tn.gelu(tn.linear(h, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return tn.add(x, h)


def _prompt_at(prompts: list[Tensor] | None, l: int) -> Tensor | None:
    if prompts is None or l >= len(prompts) or prompts[l].shape[0] == 0:
        return None
    return prompts[l]


def _run_tower(
    backbone: BackboneParams, tower: str, cls: Tensor, content: Tensor, prompts, batch: int
) -> Tensor:
    cfg = backbone.config
    for l in range(cfg.depth):
        prompt = _prompt_at(prompts, l)
        if prompt is None:
            seq = tn.concat([cls, content], axis=1)
            m = 0
        else:
            m = prompt.shape[0]
            seq = tn.concat([cls, tn.broadcast_to(prompt, (batch, *prompt.shape)), content], axis=1)
        out = transformer_block(seq, backbone.block(tower, l), cfg.n_heads)
        cls = tn.getitem(out, (slice(None), slice(0, 1)))
        content = tn.getitem(out, (slice(None), slice(1 + m, None)))
    return cls


def text_forward(
    backbone: BackboneParams, prompts: list[Tensor] | None, token_seqs: list[list[int]]
) -> Tensor:
    """Unit-norm text representations, one row per token sequence (C×d_proj)."""
    cfg = backbone.config
    if prompts is not None:
        for t in prompts:
            if t.shape[1:] != (cfg.d_text,):
                raise ConfigError(f"text prompt shape {t.shape} incompatible with d_text={cfg.d_text}")
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(token_seqs):
        if not 1 <= len(seq) <= cfg.max_text_len:
            raise ConfigError(f"token sequence length {len(seq)} outside [1, {cfg.max_text_len}]")
        by_len.setdefault(len(seq), []).append(i)
    pos = backbone["text.pos"]
    cls0 = tn.add(backbone["text.cls"], tn.getitem(pos, 0))
    rows, order = [], []
    for n, idx in by_len.items():
        toks = np.array([token_seqs[i] for i in idx])
        content = tn.add(tn.take_rows(backbone["text.tok_emb"], toks), tn.getitem(pos, slice(1, n + 1)))
        cls = tn.broadcast_to(tn.reshape(cls0, (1, 1, cfg.d_text)), (len(idx), 1, cfg.d_text))
        rows.append(_run_tower(backbone, "text", cls, content, prompts, len(idx)))
        order.extend(idx)
    cls_out = rows[0] if len(rows) == 1 else tn.concat(rows, axis=0)
    if order != sorted(order):
        inv = np.argsort(order)
        cls_out = tn.getitem(cls_out, inv)
    cls_out = tn.reshape(cls_out, (len(token_seqs), cfg.d_text))
    return tn.l2_normalize(tn.matmul(cls_out, backbone["text.proj"]))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C·patch·patch), patches in row-major order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def vision_forward(backbone: BackboneParams, prompts: list[Tensor] | None, images) -> Tensor:
    """Unit-norm visual features for a batch of images (B×d_proj)."""
    cfg = backbone.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ConfigError(f"image geometry {images.shape[1:]} != {want}")
    if prompts is not None:
        for v in prompts:
            if v.shape[1:] != (cfg.d_vis,):
                raise ConfigError(f"visual prompt shape {v.shape} incompatible with d_vis={cfg.d_vis}")
    b = images.shape[0]
    pos = backbone["vis.pos"]
    patches = tn.linear(Tensor(patchify(images, cfg.patch_size)), backbone["vis.patch_w"], backbone["vis.patch_b"])
    content = tn.add(patches, tn.getitem(pos, slice(1, None)))
    cls0 = tn.add(backbone["vis.cls"], tn.getitem(pos, 0))
    cls = tn.broadcast_to(tn.reshape(cls0, (1, 1, cfg.d_vis)), (b, 1, cfg.d_vis))
    cls = _run_tower(backbone, "vis", cls, content, prompts, b)
    return tn.l2_normalize(tn.matmul(tn.reshape(cls, (b, cfg.d_vis)), backbone["vis.proj"]))


def classify(text_reps: Tensor, features: Tensor, tau: float) -> Tensor:
    """p[i, c] = softmax_c(cos(w_c, f_i) / tau) for unit-norm inputs."""
    text_reps, features = tn.as_tensor(text_reps), tn.as_tensor(features)
    if text_reps.shape[0] < 2:
        raise ConfigError(f"classification needs at least 2 categories, got {text_reps.shape[0]}")
    squeeze = features.ndim == 1
    if squeeze:
        features = tn.reshape(features, (1, features.shape[0]))
    logits = tn.mul(tn.matmul(features, tn.transpose(text_reps, (1, 0))), 1.0 / tau)
    probs = tn.softmax(logits, axis=-1)
    return tn.reshape(probs, (probs.shape[1],)) if squeeze else probs


def predict(backbone: BackboneParams, prompts: PromptSet | None, images) -> Tensor:
    """Class probabilities (B×C) using ``prompts`` (``None`` = no prompts)."""
    tokens = template_tokens(backbone.config)
    w = text_forward(backbone, None if prompts is None else prompts.text, tokens)
    f = vision_forward(backbone, None if prompts is None else prompts.visual, images)
    return classify(w, f, backbone.tau)


def zero_shot_distribution(backbone: BackboneParams, images, class_token_sequences=None) -> np.ndarray:
    """Prompt-free prediction with template descriptions; never recorded on a tape."""
    tokens = class_token_sequences or template_tokens(backbone.config)
    with tn.no_tape():
        w = text_forward(backbone, None, tokens)
        f = vision_forward(backbone, None, images)
        return classify(w, f, backbone.tau).data


def param_count(shapes: dict[str, tuple[int, ...]]) -> int:
    return int(sum(math.prod(s) for s in shapes.values()))
