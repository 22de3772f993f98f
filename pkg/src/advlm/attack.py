"""Perturbation crafting: the combined image/scene loss, the projected
sign-descent optimizer, and the FGSM/PGD baselines.

One perturbation is shared by every frame of a sequence and kept inside
an L-infinity ball of radius epsilon; pixels are re-clamped to [0, 1]
whenever it is applied. Graphs are rebuilt per step; only the
perturbation leaf carries gradients, so model weights stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .model import (
    ToyVlmWeights,
    _WeightTensors,
    forward,
    fuse,
    prompt_feature_array,
    tokenize,
    visual_features,
)
from .prompts import PromptLibrary
from .rng import Pcg32
from .scene import FrameSequence, TransformRanges, pivotal_indices, sample_affine, warp_sequence

LINF_SLACK = 1e-9


@dataclass
class Perturbation:
    """Uniform additive noise, one frame shaped, L-inf bounded."""

    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if np.abs(self.delta).max(initial=0.0) > self.epsilon + LINF_SLACK:
            raise ValueError("perturbation exceeds the L-infinity budget")

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max(initial=0.0))


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    steps: int = 50
    alpha: float | None = None  # defaults to 2 * epsilon / steps
    lam: float = 0.4
    pivotal_frames: int = 6
    prompt_width: int = 3
    mode: str = "targeted"
    seed: int = 0
    transforms_per_step: int = 1
    identity_transforms: bool = False
    reselect_per_step: bool = False
    ranges: TransformRanges = field(default_factory=TransformRanges)

    @property
    def effective_alpha(self) -> float:
        return 2.0 * self.epsilon / self.steps if self.alpha is None else self.alpha

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.effective_alpha <= 0:
            raise ValueError("step size must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.pivotal_frames < 1:
            raise ValueError("pivotal frame count must be >= 1")
        if self.prompt_width < 1:
            raise ValueError("prompt width must be >= 1")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.transforms_per_step < 1:
            raise ValueError("transforms per step must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "steps": self.steps,
            "alpha": self.effective_alpha,
            "lambda": self.lam,
            "pivotal_frames": self.pivotal_frames,
            "prompt_width": self.prompt_width,
            "mode": self.mode,
            "seed": self.seed,
            "transforms_per_step": self.transforms_per_step,
            "identity_transforms": self.identity_transforms,
            "reselect_per_step": self.reselect_per_step,
            "ranges": {
                "max_rotation_deg": self.ranges.max_rotation_deg,
                "max_translation": self.ranges.max_translation,
                "scale_lo": self.ranges.scale_lo,
                "scale_hi": self.ranges.scale_hi,
            },
        }


@dataclass
class AttackTrace:
    l_image: list = field(default_factory=list)
    l_scene: list = field(default_factory=list)
    l_attack: list = field(default_factory=list)
    linf: list = field(default_factory=list)
    final_target_prob: float = float("nan")
    best_step: int = -1
    best_loss: float = float("inf")

    def record(self, l_img: float, l_scn: float, l_att: float, linf: float) -> None:
        self.l_image.append(l_img)
        self.l_scene.append(l_scn)
        self.l_attack.append(l_att)
        self.linf.append(linf)
        if l_att < self.best_loss:
            self.best_loss = l_att
            self.best_step = len(self.l_attack) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,l_image,l_scene,l_attack,linf\n")
            rows = zip(self.l_image, self.l_scene, self.l_attack, self.linf)
            for i, (a, b, c, d) in enumerate(rows):
                fh.write(f"{i},{a!r},{b!r},{c!r},{d!r}\n")


def apply(seq: FrameSequence, pert: Perturbation) -> FrameSequence:
    """Add the same delta to every frame, then clamp pixels to [0, 1]."""
    if pert.delta.shape != seq.frame_shape:
        raise ValueError(
            f"delta shape {pert.delta.shape} does not match frames {seq.frame_shape}"
        )
    frames = np.clip(seq.frames + pert.delta[None], 0.0, 1.0)
    return FrameSequence(frames, seq.scenario_id)


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _nll_on_frames(wt, frames_arr, delta_t, prompt_feat, target: int):
    """Target NLL for (frames + delta) under one fixed prompt feature."""
    batch = ad.clamp(ad.add(ad.Tensor(frames_arr), delta_t), 0.0, 1.0)
    vis = visual_features(wt, batch)
    return ad.nll(fuse(wt, ad.Tensor(prompt_feat), vis), target)


def _image_loss(wt, frames_arr, delta_t, prompt_feats, target, rng, cfg: AttackConfig):
    """Sum over prompt variants of the target NLL on re-rendered views.

    Each variant draws its own viewpoint transforms; with more than one
    transform sample per step the per-variant term is their mean.
    """
    terms = []
    for pf in prompt_feats:
        samples = []
        for _ in range(cfg.transforms_per_step):
            if cfg.identity_transforms:
                view = frames_arr
            else:
                params = [sample_affine(rng, cfg.ranges) for _ in range(frames_arr.shape[0])]
                view = warp_sequence(frames_arr, params)
            samples.append(_nll_on_frames(wt, view, delta_t, pf, target))
        term = samples[0] if len(samples) == 1 else ad.mul(_sum_terms(samples), 1.0 / len(samples))
        terms.append(term)
    return _sum_terms(terms)


def _scene_loss(wt, pivotal_arr, delta_t, prompt_feats, target):
    """Target NLL on the perturbed pivotal frames, summed over variants.

    The visual features are shared: the pivotal view does not depend on
    the prompt."""
    batch = ad.clamp(ad.add(ad.Tensor(pivotal_arr), delta_t), 0.0, 1.0)
    vis = visual_features(wt, batch)
    terms = [ad.nll(fuse(wt, ad.Tensor(pf), vis), target) for pf in prompt_feats]
    return _sum_terms(terms)


def loss_image(seq: FrameSequence, seed_prompt: str, library: PromptLibrary, delta: np.ndarray, weights: ToyVlmWeights, rng: Pcg32, cfg: AttackConfig, target: int):
    """Spec-level entry: build the image-wise loss as a live graph tensor."""
    texts = library.select_for_prompt(seed_prompt)[: cfg.prompt_width]
    feats = [prompt_feature_array(weights, tokenize(t, weights.vocab)) for t in texts]
    wt = _WeightTensors(weights, requires_grad=False)
    delta_t = ad.Tensor(delta, requires_grad=True)
    return _image_loss(wt, seq.frames, delta_t, feats, target, rng, cfg), delta_t


def loss_scene(seq: FrameSequence, seed_prompt: str, library: PromptLibrary, delta: np.ndarray, weights: ToyVlmWeights, cfg: AttackConfig, target: int, pivotal_idx=None):
    """Spec-level entry: scene-wise loss over the pivotal subset."""
    texts = library.select_for_prompt(seed_prompt)[: cfg.prompt_width]
    feats = [prompt_feature_array(weights, tokenize(t, weights.vocab)) for t in texts]
    if pivotal_idx is None:
        k = min(cfg.pivotal_frames, len(seq))
        seed_ids = tokenize(seed_prompt, weights.vocab)
        pivotal_idx = pivotal_indices(seq, k, weights, seed_ids)
    wt = _WeightTensors(weights, requires_grad=False)
    delta_t = ad.Tensor(delta, requires_grad=True)
    return _scene_loss(wt, seq.frames[list(pivotal_idx)], delta_t, feats, target), delta_t


def loss_attack(l_img, l_scn, lam: float):
    """Convex combination (1 - lambda) * image + lambda * scene."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return ad.add(ad.mul(l_img, 1.0 - lam), ad.mul(l_scn, lam))


def _attack_target(scenario, cfg: AttackConfig) -> int:
    return scenario.target if cfg.mode == "targeted" else scenario.label


def _final_prob(weights, seq, pert, prompt, cls) -> float:
    attacked = apply(seq, pert)
    ids = tokenize(prompt, weights.vocab)
    return float(forward(weights, attacked, ids).probs[cls])


def advlm_attack(scenario, library: PromptLibrary, weights: ToyVlmWeights, cfg: AttackConfig, rng: Pcg32):
    """Full attack: pivotal frames once up front, then projected sign
    descent on the combined loss. Returns (Perturbation, AttackTrace)."""
    cfg.validate()
    seq = scenario.seq
    target = _attack_target(scenario, cfg)
    texts = library.select_for_prompt(scenario.prompt)[: cfg.prompt_width]
    feats = [prompt_feature_array(weights, tokenize(t, weights.vocab)) for t in texts]
    seed_ids = tokenize(scenario.prompt, weights.vocab)
    k = min(cfg.pivotal_frames, len(seq))
    piv = pivotal_indices(seq, k, weights, seed_ids)

    alpha = cfg.effective_alpha
    eps = cfg.epsilon
    delta = np.zeros(seq.frame_shape)
    trace = AttackTrace()
    for step in range(cfg.steps):
        if cfg.reselect_per_step and step > 0:
            perturbed = FrameSequence(
                np.clip(seq.frames + delta[None], 0.0, 1.0), seq.scenario_id
            )
            piv = pivotal_indices(perturbed, k, weights, seed_ids)
        wt = _WeightTensors(weights, requires_grad=False)
        delta_t = ad.Tensor(delta, requires_grad=True)
        try:
            l_img = _image_loss(wt, seq.frames, delta_t, feats, target, rng, cfg)
            l_scn = _scene_loss(wt, seq.frames[list(piv)], delta_t, feats, target)
            objective = loss_attack(l_img, l_scn, cfg.lam)
            if cfg.mode == "untargeted":
                objective = ad.neg(objective)
            ad.backward(objective)
        except ad.NumericError as exc:
            raise ad.NumericError(f"non-finite loss at attack step {step}: {exc}") from exc
        grad = delta_t.grad if delta_t.grad is not None else np.zeros_like(delta)
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)
        trace.record(l_img.item(), l_scn.item(), objective.item(), float(np.abs(delta).max()))
    pert = Perturbation(delta, eps)
    trace.final_target_prob = _final_prob(weights, seq, pert, scenario.prompt, target)
    return pert, trace


def advlm_attack_multi(scenarios, library: PromptLibrary, weights: ToyVlmWeights, cfg: AttackConfig, rng: Pcg32):
    """Accumulation mode: one delta optimized over several scenarios.

    The per-step objective is the sum of every scenario's combined loss;
    all sequences must share a frame shape."""
    cfg.validate()
    if not scenarios:
        raise ValueError("no scenarios given")
    shapes = {s.seq.frame_shape for s in scenarios}
    if len(shapes) != 1:
        raise ValueError("scenarios must share one frame shape")
    prepared = []
    for s in scenarios:
        texts = library.select_for_prompt(s.prompt)[: cfg.prompt_width]
        feats = [prompt_feature_array(weights, tokenize(t, weights.vocab)) for t in texts]
        seed_ids = tokenize(s.prompt, weights.vocab)
        k = min(cfg.pivotal_frames, len(s.seq))
        piv = pivotal_indices(s.seq, k, weights, seed_ids)
        prepared.append((s, feats, piv, _attack_target(s, cfg)))

    alpha, eps = cfg.effective_alpha, cfg.epsilon
    delta = np.zeros(scenarios[0].seq.frame_shape)
    trace = AttackTrace()
    for step in range(cfg.steps):
        wt = _WeightTensors(weights, requires_grad=False)
        delta_t = ad.Tensor(delta, requires_grad=True)
        img_terms, scn_terms = [], []
        for s, feats, piv, target in prepared:
            img_terms.append(_image_loss(wt, s.seq.frames, delta_t, feats, target, rng, cfg))
            scn_terms.append(_scene_loss(wt, s.seq.frames[list(piv)], delta_t, feats, target))
        objective = loss_attack(_sum_terms(img_terms), _sum_terms(scn_terms), cfg.lam)
        if cfg.mode == "untargeted":
            objective = ad.neg(objective)
        ad.backward(objective)
        grad = delta_t.grad if delta_t.grad is not None else np.zeros_like(delta)
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)
        trace.record(
            sum(t.item() for t in img_terms),
            sum(t.item() for t in scn_terms),
            objective.item(),
            float(np.abs(delta).max()),
        )
    return Perturbation(delta, eps), trace


def fgsm_attack(scenario, prompt: str, weights: ToyVlmWeights, cfg: AttackConfig) -> Perturbation:
    """Single sign step of size epsilon from delta = 0."""
    cfg.validate()
    target = _attack_target(scenario, cfg)
    pf = prompt_feature_array(weights, tokenize(prompt, weights.vocab))
    wt = _WeightTensors(weights, requires_grad=False)
    delta_t = ad.Tensor(np.zeros(scenario.seq.frame_shape), requires_grad=True)
    objective = _nll_on_frames(wt, scenario.seq.frames, delta_t, pf, target)
    if cfg.mode == "untargeted":
        objective = ad.neg(objective)
    ad.backward(objective)
    grad = delta_t.grad if delta_t.grad is not None else np.zeros(scenario.seq.frame_shape)
    return Perturbation(-cfg.epsilon * np.sign(grad), cfg.epsilon)


def pgd_attack(scenario, prompt: str, weights: ToyVlmWeights, cfg: AttackConfig, rng: Pcg32 | None = None):
    """Projected sign descent on the single-prompt NLL; no transforms,
    no prompt library, no pivotal machinery."""
    cfg.validate()
    seq = scenario.seq
    target = _attack_target(scenario, cfg)
    pf = prompt_feature_array(weights, tokenize(prompt, weights.vocab))
    alpha, eps = cfg.effective_alpha, cfg.epsilon
    delta = np.zeros(seq.frame_shape)
    trace = AttackTrace()
    for step in range(cfg.steps):
        wt = _WeightTensors(weights, requires_grad=False)
        delta_t = ad.Tensor(delta, requires_grad=True)
        try:
            loss = _nll_on_frames(wt, seq.frames, delta_t, pf, target)
            objective = ad.neg(loss) if cfg.mode == "untargeted" else loss
            ad.backward(objective)
        except ad.NumericError as exc:
            raise ad.NumericError(f"non-finite loss at attack step {step}: {exc}") from exc
        grad = delta_t.grad if delta_t.grad is not None else np.zeros_like(delta)
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)
        trace.record(loss.item(), 0.0, objective.item(), float(np.abs(delta).max()))
    pert = Perturbation(delta, eps)
    trace.final_target_prob = _final_prob(weights, seq, pert, prompt, target)
    return pert, trace


def save_perturbation(dir_path, scenario_id: str, pert: Perturbation, cfg: AttackConfig, method: str, target: int) -> None:
    """Perturbation artifact: ADVT tensor plus a JSON sidecar."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(dir_path / f"{scenario_id}.advt", pert.delta)
    sidecar = {
        "epsilon": pert.epsilon,
        "steps": cfg.steps,
        "alpha": cfg.effective_alpha,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "scenario_id": scenario_id,
        "mode": cfg.mode,
        "target": target,
        "method": method,
    }
    with open(dir_path / f"{scenario_id}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_perturbation(dir_path, scenario_id: str) -> Perturbation:
    dir_path = Path(dir_path)
    with open(dir_path / f"{scenario_id}.json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    delta = tensorio.load_tensor(dir_path / f"{scenario_id}.advt")
    return Perturbation(delta, sidecar["epsilon"])
