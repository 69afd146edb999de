"""Dense-captioning transformer over frozen backbone features.

The encoder pools a (H, W, C) feature map to a fixed grid, treats every
grid cell as one memory token, and runs post-norm layers of multi-head
self-attention followed by a convolutional feed-forward block that slides
over the position axis. The decoder is a causal transformer whose
cross-attention weights over the memory positions are the attention maps
used by the doubly-stochastic regularizer and exported for inspection.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import init
from .autodiff.io import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .autodiff.tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_MASK_VALUE = -1e9


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Token <-> id bijection with PAD, BOS, EOS and UNK fixed at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise ValueError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[int(i)])
        return out

    def encode_caption(self, tokens: Sequence[str]) -> list[int]:
        """BOS + ids + EOS, the layout used for teacher forcing."""
        return [BOS, *self.encode(tokens), EOS]


def build_vocab(corpus: Sequence[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    if not corpus:
        raise ValueError("build_vocab needs a non-empty corpus")
    counts = Counter(tok for caption in corpus for tok in caption if tok not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary([*RESERVED, *kept])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionerConfig:
    feature_channels: int
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    pooled_h: int = 4
    pooled_w: int = 4
    ffn_hidden: int = 64
    t_max: int = 40
    lambda_dsa: float = 1.0
    conv_kernel: int = 3  # odd; 1 turns the conv-ffn into a per-position MLP

    def __post_init__(self) -> None:
        for name in ("feature_channels", "vocab_size", "d_model", "n_heads", "n_layers", "pooled_h", "pooled_w", "ffn_hidden", "conv_kernel"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if self.lambda_dsa < 0:
            raise ValueError("lambda_dsa must be non-negative")
        if self.vocab_size < len(RESERVED):
            raise ValueError("vocab_size must include the reserved tokens")

    @property
    def n_positions(self) -> int:
        return self.pooled_h * self.pooled_w


def _attention_params(rng, params: dict[str, Tensor], prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        params[f"{prefix}.{name}.w"] = init.dense(rng, d, d)
        params[f"{prefix}.{name}.b"] = init.zeros(d)


def _norm_params(params: dict[str, Tensor], prefix: str, d: int) -> None:
    params[f"{prefix}.g"] = init.ones(d)
    params[f"{prefix}.b"] = init.zeros(d)


class CaptionerModel:
    def __init__(self, config: CaptionerConfig, params: dict[str, Tensor], vocab: Vocabulary | None = None):
        self.config = config
        self.params = params
        self.vocab = vocab

    @classmethod
    def init(cls, config: CaptionerConfig, seed: int = 0, vocab: Vocabulary | None = None) -> "CaptionerModel":
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
        rng = np.random.default_rng(seed)
        d, k, hidden = config.d_model, config.conv_kernel, config.ffn_hidden
        p: dict[str, Tensor] = {}
        p["enc.in.w"] = init.dense(rng, config.feature_channels, d)
        p["enc.in.b"] = init.zeros(d)
        p["enc.pos"] = init.glorot_uniform(rng, (config.n_positions, d), config.n_positions, d)
        for layer in range(config.n_layers):
            pre = f"enc{layer}"
            _attention_params(rng, p, f"{pre}.attn", d)
            _norm_params(p, f"{pre}.ln1", d)
            p[f"{pre}.ffn.w1"] = init.conv(rng, 1, k, d, hidden)
            p[f"{pre}.ffn.b1"] = init.zeros(hidden)
            p[f"{pre}.ffn.w2"] = init.conv(rng, 1, k, hidden, d)
            p[f"{pre}.ffn.b2"] = init.zeros(d)
            _norm_params(p, f"{pre}.ln2", d)
        p["dec.tok"] = init.glorot_uniform(rng, (config.vocab_size, d), config.vocab_size, d)
        p["dec.pos"] = init.glorot_uniform(rng, (max(config.t_max, 1), d), max(config.t_max, 1), d)
        for layer in range(config.n_layers):
            pre = f"dec{layer}"
            _attention_params(rng, p, f"{pre}.self", d)
            _norm_params(p, f"{pre}.ln1", d)
            _attention_params(rng, p, f"{pre}.cross", d)
            _norm_params(p, f"{pre}.ln2", d)
            p[f"{pre}.ffn.w1"] = init.dense(rng, d, hidden)
            p[f"{pre}.ffn.b1"] = init.zeros(hidden)
            p[f"{pre}.ffn.w2"] = init.dense(rng, hidden, d)
            p[f"{pre}.ffn.b2"] = init.zeros(d)
            _norm_params(p, f"{pre}.ln3", d)
        # small output weights keep the initial next-token distribution near uniform
        p["out.w"] = Tensor(0.1 * init.dense(rng, d, config.vocab_size).data, requires_grad=True)
        p["out.b"] = init.zeros(config.vocab_size)
        return cls(config, p, vocab)

    def save(self, directory) -> None:
        meta: dict = {"kind": "captioner", "config": asdict(self.config)}
        if self.vocab is not None:
            meta["vocab"] = list(self.vocab.tokens)
        save_checkpoint(directory, self.params, meta)

    @classmethod
    def load(cls, directory) -> "CaptionerModel":
        meta = read_manifest(directory).get("meta", {})
        if meta.get("kind") != "captioner":
            raise CheckpointError(f"{directory}: not a captioner checkpoint")
        try:
            config = CaptionerConfig(**meta["config"])
            vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else None
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{directory}: bad captioner config in manifest ({exc})") from None
        model = cls.init(config, vocab=vocab)
        load_checkpoint(directory, model.params)
        return model


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class AttentionMaps:
    """Cross-attention weights per decoder layer, each shaped (heads, T, P²)."""

    layers: list[Tensor] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        return [a.data for a in self.layers]


def _multi_head(params: Mapping[str, Tensor], prefix: str, query: Tensor, source: Tensor, n_heads: int, causal: bool = False) -> tuple[Tensor, Tensor]:
    t, d = query.shape
    s = source.shape[0]
    dk = d // n_heads
    q = ad.linear(query, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]).reshape(t, n_heads, dk).transpose(1, 0, 2)
    k = ad.linear(source, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]).reshape(s, n_heads, dk).transpose(1, 2, 0)
    v = ad.linear(source, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]).reshape(s, n_heads, dk).transpose(1, 0, 2)
    scores = ad.scale(q @ k, 1.0 / math.sqrt(dk))  # (heads, t, s)
    if causal:
        scores = scores + np.triu(np.full((t, s), _MASK_VALUE), k=1)
    weights = ad.softmax(scores, axis=-1)
    context = (weights @ v).transpose(1, 0, 2).reshape(t, d)
    return ad.linear(context, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"]), weights


def _norm(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _conv_ffn(params: Mapping[str, Tensor], prefix: str, x: Tensor, kernel: int) -> Tensor:
    n, d = x.shape
    pad = (0, kernel // 2)
    h = ad.relu(ad.conv2d(x.reshape(1, n, d), params[f"{prefix}.w1"], params[f"{prefix}.b1"], pad))
    return ad.conv2d(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"], pad).reshape(n, d)


def encode_features(model: CaptionerModel, features, return_attention: bool = False):
    """Memory tokens (P², d_model) for one (H, W, C) feature map."""
    cfg, p = model.config, model.params
    features = ad.as_tensor(features)
    if features.ndim != 3:
        raise ad.DimensionError(f"encode_features: expected (H, W, C) features, got {features.shape}")
    if features.shape[2] != cfg.feature_channels:
        raise ad.DimensionError(f"encode_features: model expects {cfg.feature_channels} channels, got {features.shape[2]}")
    pooled = ad.adaptive_max_pool2d(features, cfg.pooled_h, cfg.pooled_w)
    tokens = ad.flatten_hwc(pooled).reshape(cfg.n_positions, cfg.feature_channels)
    x = ad.linear(tokens, p["enc.in.w"], p["enc.in.b"]) + p["enc.pos"]
    attention = []
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}"
        attn, weights = _multi_head(p, f"{pre}.attn", x, x, cfg.n_heads)
        attention.append(weights)
        x = _norm(p, f"{pre}.ln1", x + attn)
        x = _norm(p, f"{pre}.ln2", x + _conv_ffn(p, f"{pre}.ffn", x, cfg.conv_kernel))
    return (x, attention) if return_attention else x


def _decode(model: CaptionerModel, memory: Tensor, inputs: Sequence[int]) -> tuple[Tensor, AttentionMaps]:
    cfg, p = model.config, model.params
    t = len(inputs)
    x = ad.embedding_lookup(p["dec.tok"], inputs) + p["dec.pos"][:t]
    maps = AttentionMaps()
    for layer in range(cfg.n_layers):
        pre = f"dec{layer}"
        attn, _ = _multi_head(p, f"{pre}.self", x, x, cfg.n_heads, causal=True)
        x = _norm(p, f"{pre}.ln1", x + attn)
        cross, alpha = _multi_head(p, f"{pre}.cross", x, memory, cfg.n_heads)
        maps.layers.append(alpha)
        x = _norm(p, f"{pre}.ln2", x + cross)
        hidden = ad.relu(ad.linear(x, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        x = _norm(p, f"{pre}.ln3", x + ad.linear(hidden, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"]))
    return ad.linear(x, p["out.w"], p["out.b"]), maps


def forward_teacher_forced(model: CaptionerModel, memory, gt_tokens: Sequence[int]) -> tuple[Tensor, AttentionMaps]:
    """Logits (T, V) predicting ``gt_tokens[1:]`` from ``gt_tokens[:-1]``.

    ``gt_tokens`` is the full BOS ... EOS sequence, so T = len(gt_tokens) - 1.
    """
    cfg = model.config
    gt = [int(i) for i in gt_tokens]
    if not gt or gt[0] != BOS:
        raise ValueError("gt_tokens must begin with BOS")
    if len(gt) < 2:
        raise ValueError("gt_tokens needs at least one token after BOS")
    bad = [i for i in gt if not 0 <= i < cfg.vocab_size]
    if bad:
        raise ValueError(f"token id {bad[0]} outside vocabulary of size {cfg.vocab_size}")
    if len(gt) - 1 > cfg.t_max:
        raise ValueError(f"caption needs {len(gt) - 1} decoder steps, t_max is {cfg.t_max}")
    return _decode(model, ad.as_tensor(memory), gt[:-1])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def dsa_regularizer(maps) -> Tensor:
    """Sum over layers of (1/L) * sum over heads and positions of (1 - column sum)^2.

    ``maps`` is an :class:`AttentionMaps` or a sequence of (heads, T, P²)
    arrays or tensors, one per layer.
    """
    layers = maps.layers if isinstance(maps, AttentionMaps) else list(maps)
    if not layers:
        raise ValueError("dsa_regularizer needs at least one layer of attention maps")
    n_layers = len(layers)
    total: Tensor | None = None
    for alpha in layers:
        alpha = ad.as_tensor(alpha)
        if alpha.ndim != 3:
            raise ad.DimensionError(f"attention maps must be (heads, T, P²), got {alpha.shape}")
        term = ad.scale(((1.0 - alpha.sum(axis=1)) ** 2).sum(), 1.0 / n_layers)
        total = term if total is None else total + term
    return total


def caption_loss(logits, targets: Sequence[int], maps, lambda_dsa: float = 1.0) -> Tensor:
    ce = ad.cross_entropy(logits, targets, ignore_id=PAD)
    if lambda_dsa == 0:
        return ce
    return ce + ad.scale(dsa_regularizer(maps), lambda_dsa)


def sequence_loss(model: CaptionerModel, features, gt_tokens: Sequence[int], lambda_dsa: float | None = None) -> Tensor:
    """Full objective for one (features, BOS ... EOS) pair."""
    lam = model.config.lambda_dsa if lambda_dsa is None else lambda_dsa
    logits, maps = forward_teacher_forced(model, encode_features(model, features), gt_tokens)
    return caption_loss(logits, list(gt_tokens)[1:], maps, lam)


# ---------------------------------------------------------------------------
# Decoding and export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    truncated: bool
    maps: tuple[np.ndarray, ...] = field(default=(), compare=False)  # per layer (heads, steps, P²)


def greedy_decode(model: CaptionerModel, memory, t_max: int | None = None) -> DecodeResult:
    """Argmax decoding from BOS until EOS or ``t_max`` decoder steps."""
    t_max = model.config.t_max if t_max is None else int(t_max)
    if t_max > model.config.t_max:
        raise ValueError(f"t_max {t_max} exceeds the model's positional range {model.config.t_max}")
    memory = ad.as_tensor(memory)
    seq = [BOS]
    maps: tuple[np.ndarray, ...] = ()
    with ad.no_grad():
        for _ in range(t_max):
            logits, step_maps = _decode(model, memory, seq)
            maps = tuple(step_maps.arrays())
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                return DecodeResult(tuple(seq[1:]), False, maps)
            seq.append(nxt)
    return DecodeResult(tuple(seq[1:]), True, maps)


def caption_features(model: CaptionerModel, features, t_max: int | None = None) -> DecodeResult:
    with ad.no_grad():
        memory = encode_features(model, features)
    return greedy_decode(model, memory, t_max)


def write_attention_csv(maps, path) -> None:
    """One row per weight: layer, head, token index, position index, weight."""
    layers = maps.arrays() if isinstance(maps, AttentionMaps) else [np.asarray(ad.as_tensor(a).data) for a in maps]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "head", "token", "position", "weight"])
        for layer, alpha in enumerate(layers):
            for (head, token, position), weight in np.ndenumerate(alpha):
                writer.writerow([layer, head, token, position, repr(float(weight))])


# ---------------------------------------------------------------------------
# Frozen toy backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyBackbone:
    """Fixed random conv stack turning (H, W, 3) images into (H, W, C) features.

    Weights depend only on ``seed``; nothing here is ever trained.
    """

    in_channels: int = 3
    channels: tuple[int, ...] = (8, 8)
    seed: int = 1234

    def _weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(self.seed)
        out, c_in = [], self.in_channels
        for c_out in self.channels:
            out.append((init.conv(rng, 3, 3, c_in, c_out).data, rng.normal(0.0, 0.1, size=c_out)))
            c_in = c_out
        return out

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def __call__(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ad.DimensionError(f"backbone expects (H, W, {self.in_channels}) images, got {x.shape}")
        with ad.no_grad():
            for w, b in self._weights():
                x = ad.relu(ad.conv2d(x, w, b, 1)).data
        return x


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionerTrainConfig:
    epochs: int = 500
    lr: float = 3e-3
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0
    min_freq: int = 1
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    pooled_h: int = 4
    pooled_w: int = 4
    ffn_hidden: int = 64
    t_max: int = 40
    lambda_dsa: float = 1.0
    conv_kernel: int = 3

    def model_config(self, feature_channels: int, vocab_size: int) -> CaptionerConfig:
        return CaptionerConfig(
            feature_channels=feature_channels,
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            pooled_h=self.pooled_h,
            pooled_w=self.pooled_w,
            ffn_hidden=self.ffn_hidden,
            t_max=self.t_max,
            lambda_dsa=self.lambda_dsa,
            conv_kernel=self.conv_kernel,
        )


def train_captioner(
    dataset: Sequence[tuple[np.ndarray, Sequence[str]]],
    config: CaptionerTrainConfig = CaptionerTrainConfig(),
    vocab: Vocabulary | None = None,
) -> tuple[CaptionerModel, list[float]]:
    """Per-sample Adam over shuffled (features, caption tokens) pairs.

    Returns the model (carrying its vocabulary) and the mean loss of each
    epoch. Features are plain inputs and never receive updates.
    """
    if not dataset:
        raise ValueError("train_captioner needs a non-empty dataset")
    if config.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")
    vocab = vocab or build_vocab([list(c) for _, c in dataset], config.min_freq)
    features = [np.asarray(f, dtype=np.float64) for f, _ in dataset]
    channels = {f.shape[-1] for f in features}
    if len(channels) != 1 or any(f.ndim != 3 for f in features):
        raise ad.DimensionError("all feature maps must be rank 3 with the same channel count")
    sequences = [vocab.encode_caption(c) for _, c in dataset]
    for k, seq in enumerate(sequences):
        if len(seq) - 1 > config.t_max:
            raise ValueError(f"caption {k} has {len(seq) - 2} tokens; t_max {config.t_max} allows at most {config.t_max - 1}")

    model = CaptionerModel.init(config.model_config(channels.pop(), len(vocab)), seed=config.seed, vocab=vocab)
    opt = ad.Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            opt.state.lr = ad.cosine_lr(config.lr, epoch, config.epochs)
        total = 0.0
        for k in rng.permutation(len(dataset)):
            opt.zero_grad()
            loss = sequence_loss(model, features[k], sequences[k])
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(total / len(dataset))
    return model, history
