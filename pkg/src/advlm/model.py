"""Toy differentiable vision-language driving model.

Maps (frame sequence, prompt token ids) to a distribution over a closed
set of driving responses. The prompt is encoded as the mean token
embedding, each frame by a two-stage stride-2 conv stack with global
average pooling, and both halves are fused by a small MLP. Attention
maps are gradient saliency w.r.t. the input pixels.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensorio
from .rng import Pcg32
from .scene import FrameSequence

RESPONSE_CLASSES = ("straight", "left", "right", "stop", "slow")

UNK_ID = 0
PAD_ID = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Dense token -> id mapping with <unk>=0 and <pad>=1."""

    def __init__(self, tokens):
        self.token_to_id = {"<unk>": UNK_ID, "<pad>": PAD_ID}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def to_file(self, path) -> None:
        # line number = id - 2; specials are implicit
        toks = [self.id_to_token[i] for i in range(2, len(self.token_to_id))]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(toks) + ("\n" if toks else ""))

    @staticmethod
    def from_file(path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            toks = [line.strip() for line in fh if line.strip()]
        return Vocabulary(toks)


def tokenize(text: str, vocab: Vocabulary) -> list:
    """Lowercase split on non-alphanumerics; unknown -> <unk>, empty -> [<pad>]."""
    words = _TOKEN_RE.findall(text.lower())
    if not words:
        return [PAD_ID]
    return [vocab.token_to_id.get(w, UNK_ID) for w in words]


@dataclass
class ToyVlmConfig:
    embed_dim: int = 32
    frame_shape: tuple = (3, 32, 32)
    conv_channels: tuple = (8, 16)
    fusion_hidden: int = 64
    num_classes: int = 5

    def __post_init__(self):
        dims = (self.embed_dim, self.fusion_hidden, *self.frame_shape, *self.conv_channels)
        if any(d <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 response classes")

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim,
            "frame_shape": list(self.frame_shape),
            "conv_channels": list(self.conv_channels),
            "fusion_hidden": self.fusion_hidden,
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d) -> "ToyVlmConfig":
        return ToyVlmConfig(
            embed_dim=d["embed_dim"],
            frame_shape=tuple(d["frame_shape"]),
            conv_channels=tuple(d["conv_channels"]),
            fusion_hidden=d["fusion_hidden"],
            num_classes=d["num_classes"],
        )


@dataclass
class ToyVlmWeights:
    """All learnable arrays plus the config/vocab they were built for."""

    config: ToyVlmConfig
    vocab: Vocabulary
    embed: np.ndarray
    conv_kernels: list
    conv_biases: list
    vis_proj_w: np.ndarray
    vis_proj_b: np.ndarray
    fuse_w1: np.ndarray
    fuse_b1: np.ndarray
    fuse_w2: np.ndarray
    fuse_b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    train_seed: int = -1

    def arrays(self) -> list:
        out = [self.embed]
        for k, b in zip(self.conv_kernels, self.conv_biases):
            out.extend([k, b])
        out.extend(
            [
                self.vis_proj_w,
                self.vis_proj_b,
                self.fuse_w1,
                self.fuse_b1,
                self.fuse_w2,
                self.fuse_b2,
                self.head_w,
                self.head_b,
            ]
        )
        return out


@dataclass
class ResponseDistribution:
    """Normalized distribution over the driving response classes."""

    log_probs: np.ndarray

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        total = float(np.exp(self.log_probs).sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, expected 1")

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.log_probs))


EMBED_INIT_STD = 2.5
FUSE_CAP = 2.0


def init_weights(config: ToyVlmConfig, vocab: Vocabulary, rng: Pcg32) -> ToyVlmWeights:
    """Gaussian init. Embeddings start large so fusion gating is strongly
    prompt-conditioned; the visual pathway must learn to act within it."""
    d = config.embed_dim

    def gauss(shape, std):
        return rng.normal_block(int(np.prod(shape))).reshape(shape) * std

    embed = gauss((len(vocab), d), EMBED_INIT_STD)
    kernels, biases = [], []
    c_in = config.frame_shape[0]
    for c_out in config.conv_channels:
        kernels.append(gauss((c_out, c_in, 3, 3), np.sqrt(2.0 / (c_in * 9))))
        biases.append(np.zeros(c_out))
        c_in = c_out
    vis_proj_w = gauss((c_in, d), np.sqrt(2.0 / c_in))
    fuse_w1 = gauss((2 * d, config.fusion_hidden), np.sqrt(2.0 / (2 * d)))
    fuse_w2 = gauss((config.fusion_hidden, d), np.sqrt(2.0 / config.fusion_hidden))
    head_w = gauss((d, config.num_classes), np.sqrt(1.0 / d))
    return ToyVlmWeights(
        config=config,
        vocab=vocab,
        embed=embed,
        conv_kernels=kernels,
        conv_biases=biases,
        vis_proj_w=vis_proj_w,
        vis_proj_b=np.zeros(d),
        fuse_w1=fuse_w1,
        fuse_b1=np.zeros(config.fusion_hidden),
        fuse_w2=fuse_w2,
        fuse_b2=np.zeros(d),
        head_w=head_w,
        head_b=np.zeros(config.num_classes),
    )


class _WeightTensors:
    """Per-graph Tensor wrappers around the weight arrays."""

    def __init__(self, w: ToyVlmWeights, requires_grad: bool):
        rg = requires_grad
        self.embed = ad.Tensor(w.embed, rg)
        self.conv = [
            (ad.Tensor(k, rg), ad.Tensor(b, rg))
            for k, b in zip(w.conv_kernels, w.conv_biases)
        ]
        self.vis_proj_w = ad.Tensor(w.vis_proj_w, rg)
        self.vis_proj_b = ad.Tensor(w.vis_proj_b, rg)
        self.fuse_w1 = ad.Tensor(w.fuse_w1, rg)
        self.fuse_b1 = ad.Tensor(w.fuse_b1, rg)
        self.fuse_w2 = ad.Tensor(w.fuse_w2, rg)
        self.fuse_b2 = ad.Tensor(w.fuse_b2, rg)
        self.head_w = ad.Tensor(w.head_w, rg)
        self.head_b = ad.Tensor(w.head_b, rg)

    def leaves(self):
        out = [self.embed]
        for k, b in self.conv:
            out.extend([k, b])
        out.extend(
            [
                self.vis_proj_w,
                self.vis_proj_b,
                self.fuse_w1,
                self.fuse_b1,
                self.fuse_w2,
                self.fuse_b2,
                self.head_w,
                self.head_b,
            ]
        )
        return out


def visual_features(wt: _WeightTensors, frames) -> ad.Tensor:
    """Sequence-level visual feature: conv stack per frame, pooled,
    projected into a bounded embedding, averaged over frames.

    The clamp keeps every visual dimension in [0, 1], so no pixel
    pattern can push the fused representation arbitrarily far."""
    x = frames if isinstance(frames, ad.Tensor) else ad.Tensor(frames)
    for k, b in wt.conv:
        x = ad.relu(ad.conv2d(x, k, b, stride=2, pad=1))
    n, c = x.shape[0], x.shape[1]
    pooled = ad.mean(x.reshape((n, c, x.shape[2] * x.shape[3])), axis=2)
    projected = ad.clamp(ad.add(ad.matmul(pooled, wt.vis_proj_w), wt.vis_proj_b), 0.0, 1.0)
    return ad.mean(projected, axis=0)


def prompt_features(wt: _WeightTensors, prompt_ids) -> ad.Tensor:
    rows = ad.take_rows(wt.embed, list(prompt_ids))
    return ad.mean(rows, axis=0)


def fuse(wt: _WeightTensors, prompt_feat: ad.Tensor, visual_feat: ad.Tensor) -> ad.Tensor:
    """Fusion MLP + head; returns K log-probabilities.

    Hidden activations are clamped: benign evidence rides the saturated
    region, so small feature shifts only matter near decision margins."""
    joint = ad.concat([prompt_feat, visual_feat]).reshape((1, -1))
    h = ad.clamp(ad.add(ad.matmul(joint, wt.fuse_w1), wt.fuse_b1), 0.0, FUSE_CAP)
    h = ad.clamp(ad.add(ad.matmul(h, wt.fuse_w2), wt.fuse_b2), 0.0, FUSE_CAP)
    logits = ad.add(ad.matmul(h, wt.head_w), wt.head_b)
    return ad.log_softmax(logits.reshape((-1,)))


def forward_graph(wt: _WeightTensors, frames, prompt_ids) -> ad.Tensor:
    return fuse(wt, prompt_features(wt, prompt_ids), visual_features(wt, frames))


def _frames_array(frames) -> np.ndarray:
    if isinstance(frames, FrameSequence):
        return frames.frames
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ValueError(f"expected N,C,H,W frames, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("frame pixels must lie in [0, 1]")
    return arr


def forward(weights: ToyVlmWeights, frames, prompt_ids) -> ResponseDistribution:
    """Inference entry point; validates inputs, returns log-probabilities."""
    arr = _frames_array(frames)
    wt = _WeightTensors(weights, requires_grad=False)
    logp = forward_graph(wt, arr, prompt_ids)
    return ResponseDistribution(logp.data)


def prompt_feature_array(weights: ToyVlmWeights, prompt_ids) -> np.ndarray:
    """Constant prompt feature for attack graphs (weights are frozen there)."""
    return weights.embed[np.asarray(prompt_ids, dtype=np.int64)].mean(axis=0)


def train(weights: ToyVlmWeights, dataset, epochs: int, lr: float, rng: Pcg32, batch_size: int = 1):
    """Plain SGD on the NLL of the labelled response.

    ``dataset`` is a list of (frames, prompt_ids, label) triples. With
    ``batch_size`` > 1, gradients are averaged over that many examples
    before each step. Returns (weights, per-epoch mean losses); arrays
    are updated in place.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    examples = []
    for frames, prompt_ids, label in dataset:
        arr = _frames_array(frames)
        examples.append((arr, list(prompt_ids), int(label)))

    arrays = weights.arrays()
    losses = []
    order = list(range(len(examples)))
    for _ in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            grads = [np.zeros_like(a) for a in arrays]
            for idx in batch:
                arr, ids, label = examples[idx]
                wt = _WeightTensors(weights, requires_grad=True)
                loss = ad.nll(forward_graph(wt, arr, ids), label)
                ad.backward(loss)
                total += loss.item()
                for g, leaf in zip(grads, wt.leaves()):
                    if leaf.grad is not None:
                        g += leaf.grad
            if lr > 0.0:
                scale = lr / len(batch)
                for arr_ref, g in zip(arrays, grads):
                    arr_ref -= scale * g
        losses.append(total / len(examples))
    return weights, losses


def attention_map(weights: ToyVlmWeights, frame: np.ndarray, prompt_ids) -> np.ndarray:
    """Gradient-saliency attention: channel-max absolute pixel gradient of
    the top class log-probability, min-max normalized to [0, 1]."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ValueError(f"attention_map expects a C,H,W frame, got {frame.shape}")
    wt = _WeightTensors(weights, requires_grad=False)
    leaf = ad.Tensor(frame, requires_grad=True)
    batch = leaf.reshape((1, *frame.shape))
    logp = forward_graph(wt, batch, prompt_ids)
    top = int(np.argmax(logp.data))
    ad.backward(ad.nll(logp, top))
    if leaf.grad is None:
        sal = np.zeros(frame.shape[1:])
    else:
        sal = np.abs(leaf.grad).max(axis=0)
    lo, hi = sal.min(), sal.max()
    if hi - lo < 1e-30:
        return np.full(frame.shape[1:], 0.5)
    return (sal - lo) / (hi - lo)


def save_weights(path, weights: ToyVlmWeights) -> None:
    """Weights file: u32 header length, JSON header (config, vocab,
    train seed), then the weight arrays as concatenated ADVT tensors."""
    header = json.dumps(
        {
            "config": weights.config.to_dict(),
            "vocab": [
                weights.vocab.id_to_token[i] for i in range(2, len(weights.vocab))
            ],
            "train_seed": weights.train_seed,
        }
    ).encode("utf-8")
    buf = io.BytesIO()
    for arr in weights.arrays():
        tensorio.write_tensor(buf, arr)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(buf.getvalue())


def load_weights(path) -> ToyVlmWeights:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ToyVlmConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocab"])
        arrays = []
        data = fh.read()
    buf = io.BytesIO(data)
    while buf.tell() < len(data):
        arrays.append(tensorio.read_tensor(buf))
    n_conv = len(config.conv_channels)
    kernels = [arrays[1 + 2 * i] for i in range(n_conv)]
    biases = [arrays[2 + 2 * i] for i in range(n_conv)]
    rest = arrays[1 + 2 * n_conv :]
    return ToyVlmWeights(
        config=config,
        vocab=vocab,
        embed=arrays[0],
        conv_kernels=kernels,
        conv_biases=biases,
        vis_proj_w=rest[0],
        vis_proj_b=rest[1],
        fuse_w1=rest[2],
        fuse_b1=rest[3],
        fuse_w2=rest[4],
        fuse_b2=rest[5],
        head_w=rest[6],
        head_b=rest[7],
        train_seed=header.get("train_seed", -1),
    )
