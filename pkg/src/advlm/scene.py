"""Visual scene machinery: similarity metrics, pivotal-frame selection
and bounded affine viewpoint transforms.

Attention maps are H,W arrays in [0,1]; frames are C,H,W arrays in
[0,1]. SSIM is the single-window (global statistics) variant, which is
exact and hand-checkable at 32x32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Pcg32

SSIM_C1 = 1e-4  # (k1 * L)^2 with k1=0.01, L=1
SSIM_C2 = 9e-4  # (k2 * L)^2 with k2=0.03, L=1
PCC_VAR_FLOOR = 1e-12


@dataclass
class FrameSequence:
    """Ordered C,H,W frames of one driving scenario."""

    frames: np.ndarray  # (N, C, H, W)
    scenario_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(
                f"frame sequence must be N,C,H,W with N >= 1, got {self.frames.shape}"
            )
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame pixels must lie in [0, 1]")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_shape(self):
        return self.frames.shape[1:]

    def subset(self, indices) -> "FrameSequence":
        return FrameSequence(self.frames[list(indices)], self.scenario_id)


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Global single-window SSIM with L=1; result in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape("ssim", a, b)
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(num / den)


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of the flattened maps; 0 for constant input."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    _check_same_shape("pcc", a, b)
    if a.size < 2:
        raise ValueError("pcc: need at least 2 elements")
    va, vb = a.var(), b.var()
    if va < PCC_VAR_FLOOR or vb < PCC_VAR_FLOOR:
        return 0.0
    cov = ((a - a.mean()) * (b - b.mean())).mean()
    return float(cov / np.sqrt(va * vb))


def sim(a: np.ndarray, b: np.ndarray) -> float:
    """Average of SSIM and PCC, the frame-similarity metric."""
    return 0.5 * (ssim(a, b) + pcc(a, b))


def frame_set_similarity(frame, selected: FrameSequence, weights, prompt_ids) -> float:
    """Similarity of one frame's attention map to the mean map of a set."""
    from .model import attention_map

    if len(selected) == 0:
        raise ValueError("selected set must be non-empty")
    own = attention_map(weights, frame, prompt_ids)
    maps = [attention_map(weights, f, prompt_ids) for f in selected.frames]
    return sim(own, np.mean(maps, axis=0))


def _greedy_order(maps: list, k: int) -> tuple:
    """Greedy pick order plus, per step, every candidate's similarity.

    Starts from frame 0; each later step adds the unselected frame with
    the smallest similarity to the mean of the selected maps, breaking
    ties toward the lowest index.
    """
    order = [0]
    steps = []
    while len(order) < k:
        mean_map = np.mean([maps[i] for i in order], axis=0)
        scored = []
        best_idx, best_val = None, None
        for i in range(len(maps)):
            if i in order:
                continue
            val = sim(maps[i], mean_map)
            scored.append((i, val))
            if best_val is None or val < best_val:
                best_idx, best_val = i, val
        order.append(best_idx)
        steps.append((best_idx, tuple(scored)))
    return order, steps


def _attention_maps(seq: FrameSequence, weights, prompt_ids) -> list:
    from .model import attention_map

    return [attention_map(weights, f, prompt_ids) for f in seq.frames]


def select_pivotal_frames(seq: FrameSequence, k: int, weights, prompt_ids) -> FrameSequence:
    """Greedy attention-diversity frame selection, output in index order."""
    idx = pivotal_indices(seq, k, weights, prompt_ids)
    return seq.subset(idx)


def pivotal_indices(seq: FrameSequence, k: int, weights, prompt_ids) -> list:
    """Original-order indices of the greedily selected pivotal frames."""
    if not 1 <= k <= len(seq):
        raise ValueError(f"k={k} out of range for sequence of length {len(seq)}")
    maps = _attention_maps(seq, weights, prompt_ids)
    order, _ = _greedy_order(maps, k)
    return sorted(order)


@dataclass
class PivotalVerification:
    """Per-step record of an exhaustive check of the greedy selection."""

    ok: bool
    picks: list
    steps: list = field(default_factory=list)  # (picked, argmin set, step ok)
    first_bad_step: int | None = None


def brute_force_pivotal(
    seq: FrameSequence, k: int, weights, prompt_ids, pick_order=None
) -> PivotalVerification:
    """Exhaustively verify each greedy step against a full candidate scan.

    ``pick_order`` defaults to the fast path's own picks; pass a
    different order to check an externally produced selection.
    """
    if len(seq) > 8:
        raise ValueError("brute-force verification capped at 8 frames")
    if not 1 <= k <= len(seq):
        raise ValueError(f"k={k} out of range for sequence of length {len(seq)}")
    maps = _attention_maps(seq, weights, prompt_ids)
    if pick_order is None:
        order, _ = _greedy_order(maps, k)
        pick_order = order
    if len(pick_order) != k:
        raise ValueError(f"pick order has {len(pick_order)} entries, expected {k}")

    steps = []
    ok = pick_order[0] == 0
    first_bad = None if ok else 0
    for step in range(1, k):
        selected = list(pick_order[:step])
        mean_map = np.mean([maps[i] for i in selected], axis=0)
        scores = {
            i: sim(maps[i], mean_map)
            for i in range(len(maps))
            if i not in selected
        }
        best = min(scores.values())
        argmins = sorted(i for i, v in scores.items() if v == best)
        chosen = pick_order[step]
        step_ok = chosen == argmins[0]
        steps.append((chosen, argmins, step_ok))
        if not step_ok and first_bad is None:
            first_bad = step
            ok = False
    return PivotalVerification(ok=ok, picks=list(pick_order), steps=steps, first_bad_step=first_bad)


@dataclass
class AffineParams:
    """Small viewpoint change: rotation about the frame center,
    translation as a fraction of the frame size, isotropic scale."""

    rotation: float = 0.0  # radians
    tx: float = 0.0  # fraction of width
    ty: float = 0.0  # fraction of height
    scale: float = 1.0

    @staticmethod
    def identity() -> "AffineParams":
        return AffineParams()


@dataclass
class TransformRanges:
    max_rotation_deg: float = 5.0
    max_translation: float = 0.05
    scale_lo: float = 0.95
    scale_hi: float = 1.05


def sample_affine(rng: Pcg32, ranges: TransformRanges | None = None) -> AffineParams:
    r = ranges or TransformRanges()
    rot = rng.uniform(-r.max_rotation_deg, r.max_rotation_deg) * np.pi / 180.0
    tx = rng.uniform(-r.max_translation, r.max_translation)
    ty = rng.uniform(-r.max_translation, r.max_translation)
    scale = rng.uniform(r.scale_lo, r.scale_hi)
    return AffineParams(rotation=rot, tx=tx, ty=ty, scale=scale)


_GRID_CACHE = {}


def _pixel_grid(h: int, w: int):
    key = (h, w)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = np.meshgrid(
            np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
        )
    return _GRID_CACHE[key]


def warp(frame: np.ndarray, params: AffineParams) -> np.ndarray:
    """Inverse-mapped affine warp about the center with bilinear sampling
    and replicated borders. Preserves the [0, 1] pixel range."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ValueError(f"warp expects a C,H,W frame, got {frame.shape}")
    c, h, w = frame.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty_px, tx_px = params.ty * h, params.tx * w

    rows, cols = _pixel_grid(h, w)
    ry = rows - cy - ty_px
    rx = cols - cx - tx_px
    cos_t, sin_t = np.cos(params.rotation), np.sin(params.rotation)
    inv_scale = 1.0 / params.scale
    # inverse rotation applied to centered, de-translated coordinates
    src_r = inv_scale * (cos_t * ry + sin_t * rx) + cy
    src_c = inv_scale * (-sin_t * ry + cos_t * rx) + cx

    src_r = np.clip(src_r, 0.0, h - 1.0)
    src_c = np.clip(src_c, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = src_r - r0
    wc = src_c - c0

    top = frame[:, r0, c0] * (1.0 - wc) + frame[:, r0, c1] * wc
    bot = frame[:, r1, c0] * (1.0 - wc) + frame[:, r1, c1] * wc
    out = top * (1.0 - wr) + bot * wr
    return np.clip(out, 0.0, 1.0)


def warp_sequence(seq_frames: np.ndarray, params_list) -> np.ndarray:
    """Warp each frame of an N,C,H,W stack with its own parameters."""
    if len(params_list) != seq_frames.shape[0]:
        raise ValueError("one AffineParams per frame required")
    return np.stack([warp(f, p) for f, p in zip(seq_frames, params_list)])
