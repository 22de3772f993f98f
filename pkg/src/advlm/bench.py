"""Synthetic driving benchmark: class-recoverable marker scenes.

Each scenario is a short frame sequence showing one colored, textured
road marker drifting over a noisy background; the response class is
fully determined by the marker. Prompts are drawn from a small pool of
instruction templates that the paraphrase machinery knows how to vary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .model import RESPONSE_CLASSES, ToyVlmWeights, Vocabulary, forward, tokenize
from .prompts import RulesBackend, table_words
from .rng import Pcg32, stable_stream
from .scene import AffineParams, FrameSequence, warp

PROMPT_TEMPLATES = (
    "what should the vehicle do at the intersection",
    "choose the next action for the car at the marker",
    "decide the correct maneuver for the vehicle ahead",
    "tell me the proper move for the car now",
    "what action should the vehicle take at the signal",
    "select the right maneuver for the car at the junction",
)

MARKER_SIZE = 16
BACKGROUND_AMP = 0.3
_STRIPE = 2  # on/off band width inside a marker, in pixels

# per-frame camera jitter baked into every scenario, so sequences carry
# genuine viewpoint variation and models trained on them are not brittle
# to small re-renders
JITTER_ROT_DEG = 3.0
JITTER_TRANS = 0.02
JITTER_SCALE = 0.03


@dataclass
class Scenario:
    """One benchmark unit: frames, instruction, truth and attack target."""

    id: str
    seq: FrameSequence
    prompt: str
    label: int
    target: int

    def __post_init__(self):
        if self.target == self.label:
            raise ValueError(f"scenario {self.id}: target must differ from label")


@dataclass
class ScenarioDesc:
    id: str
    frame_paths: list
    prompt: str
    label: int
    target: int


@dataclass
class BenchmarkManifest:
    name: str
    seed: int
    root: Path
    scenarios: list

    def save(self) -> Path:
        doc = {
            "name": self.name,
            "seed": self.seed,
            "scenarios": [
                {
                    "id": d.id,
                    "frames": d.frame_paths,
                    "prompt": d.prompt,
                    "label": d.label,
                    "target": d.target,
                }
                for d in self.scenarios
            ],
        }
        path = self.root / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        return path

    @staticmethod
    def load(path) -> "BenchmarkManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        root = path.parent
        descs = [
            ScenarioDesc(s["id"], s["frames"], s["prompt"], s["label"], s["target"])
            for s in doc["scenarios"]
        ]
        ids = [d.id for d in descs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scenario ids in manifest")
        for d in descs:
            for rel in d.frame_paths:
                if not (root / rel).exists():
                    raise FileNotFoundError(f"missing frame file {rel} for {d.id}")
        return BenchmarkManifest(doc["name"], doc["seed"], root, descs)

    def load_scenario(self, desc: ScenarioDesc) -> Scenario:
        frames = np.stack([tensorio.load_tensor(self.root / p) for p in desc.frame_paths])
        return Scenario(
            id=desc.id,
            seq=FrameSequence(frames, desc.id),
            prompt=desc.prompt,
            label=desc.label,
            target=desc.target,
        )

    def load_all(self) -> list:
        return [self.load_scenario(d) for d in self.scenarios]


def _draw_marker(frame: np.ndarray, label: int, r0: int, c0: int) -> None:
    """White texture patch; the pattern alone identifies the class, so a
    perturbation cannot shortcut through channel color statistics."""
    size = MARKER_SIZE
    patch = np.ones((3, size, size))
    band = (np.arange(size) // _STRIPE) % 2 == 1
    if label == 1:
        patch[:, band, :] = 0.0
    elif label == 2:
        patch[:, :, band] = 0.0
    elif label == 3:
        patch[:, np.ix_(band, band)[0], np.ix_(band, band)[1]] = 0.0
        patch[:, np.ix_(~band, ~band)[0], np.ix_(~band, ~band)[1]] = 0.0
    elif label == 4:
        k = 2 * _STRIPE
        patch[:, k:-k, k:-k] = 0.0
    frame[:, r0 : r0 + size, c0 : c0 + size] = patch


def synthesize_scenario(rng: Pcg32, scenario_id: str, label: int, prompt: str, target: int, frame_shape=(3, 32, 32)) -> Scenario:
    c, h, w = frame_shape
    n_frames = 4 + rng.randint(5)
    amp = BACKGROUND_AMP
    frames = rng.uniform_block(n_frames * c * h * w).reshape(n_frames, c, h, w)
    frames = frames * amp + (1.0 - amp) / 2.0
    lim_r, lim_c = h - MARKER_SIZE, w - MARKER_SIZE
    r0, c0 = rng.randint(lim_r + 1), rng.randint(lim_c + 1)
    for i, f in enumerate(frames):
        _draw_marker(f, label, r0, c0)
        jitter = AffineParams(
            rotation=rng.uniform(-JITTER_ROT_DEG, JITTER_ROT_DEG) * np.pi / 180.0,
            tx=rng.uniform(-JITTER_TRANS, JITTER_TRANS),
            ty=rng.uniform(-JITTER_TRANS, JITTER_TRANS),
            scale=rng.uniform(1.0 - JITTER_SCALE, 1.0 + JITTER_SCALE),
        )
        frames[i] = warp(f, jitter)
        r0 = min(max(r0 + rng.randint(5) - 2, 0), lim_r)
        c0 = min(max(c0 + rng.randint(5) - 2, 0), lim_c)
    return Scenario(
        id=scenario_id,
        seq=FrameSequence(np.clip(frames, 0.0, 1.0), scenario_id),
        prompt=prompt,
        label=label,
        target=target,
    )


def generate_benchmark(rng: Pcg32, size: int, out_dir, name: str = "toy") -> BenchmarkManifest:
    """Synthesize ``size`` scenarios and write frames + manifest under
    ``out_dir``. Fully determined by the generator's (seed, stream)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    k = len(RESPONSE_CLASSES)
    descs = []
    for i in range(size):
        sub = rng.spawn(f"scenario:{i}")
        label = i % k
        target = (label + 1 + sub.randint(k - 1)) % k
        prompt = PROMPT_TEMPLATES[sub.randint(len(PROMPT_TEMPLATES))]
        sid = f"{name}-{i:04d}"
        scen = synthesize_scenario(sub, sid, label, prompt, target)
        paths = []
        for j, frame in enumerate(scen.seq.frames):
            rel = f"frames/{sid}_{j:02d}.advt"
            tensorio.save_tensor(out_dir / rel, frame)
            paths.append(rel)
        descs.append(ScenarioDesc(sid, paths, prompt, label, target))
    manifest = BenchmarkManifest(name=name, seed=rng.seed, root=out_dir, scenarios=descs)
    manifest.save()
    return manifest


def split_descs(manifest: BenchmarkManifest):
    """Deterministic 80/20 train/eval split by scenario order."""
    cut = int(len(manifest.scenarios) * 0.8)
    return manifest.scenarios[:cut], manifest.scenarios[cut:]


def benchmark_vocabulary() -> Vocabulary:
    words = set(table_words())
    for template in PROMPT_TEMPLATES:
        words.update(template.split())
    words.update(RESPONSE_CLASSES)
    return Vocabulary(sorted(words))


def make_dataset(scenarios, vocab: Vocabulary) -> list:
    return [
        (s.seq.frames, tokenize(s.prompt, vocab), s.label) for s in scenarios
    ]


def held_out_paraphrases(prompt: str, k: int, eval_seed: int = 0) -> list:
    """Evaluation paraphrases from the held-out synonym partition,
    deterministic per (prompt, eval_seed). Drawn from a wide candidate
    pool so single- and multi-edit rewordings both appear."""
    backend = RulesBackend(partition="eval")
    rng = Pcg32(eval_seed, stable_stream("para:" + prompt))
    pool = backend.generate(prompt, 4 * k, rng)
    if len(pool) < k:
        raise ValueError(f"only {len(pool)} held-out paraphrases for {prompt!r}")
    rng.shuffle(pool)
    return pool[:k]


def make_predictor(weights: ToyVlmWeights):
    """Callable (frames, prompt text) -> predicted class id."""

    def predict(frames, prompt: str) -> int:
        ids = tokenize(prompt, weights.vocab)
        return forward(weights, frames, ids).argmax

    return predict


def task_score(predictor, scenarios, prompt_mode: str = "seed", k: int = 3, eval_seed: int = 0, frames_override=None) -> float:
    """Percentage of correct responses, 0-100.

    ``prompt_mode`` is "seed" or "paraphrase"; paraphrase mode averages
    correctness over ``k`` held-out paraphrases per scenario.
    ``frames_override`` maps scenario id -> frames, letting callers
    score perturbed or re-rendered views of the same scenarios.
    """
    if not scenarios:
        raise ValueError("no scenarios to score")
    if prompt_mode not in ("seed", "paraphrase"):
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    total = 0.0
    for s in scenarios:
        frames = frames_override[s.id] if frames_override else s.seq.frames
        if prompt_mode == "seed":
            texts = [s.prompt]
        else:
            texts = held_out_paraphrases(s.prompt, k, eval_seed)
        correct = sum(1.0 for t in texts if predictor(frames, t) == s.label)
        total += correct / len(texts)
    return 100.0 * total / len(scenarios)
