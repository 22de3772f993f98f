"""Attack evaluation: scoring protocols, transfer runs, ablation sweeps
and the attention-divergence analysis.

Scoring uses re-rendered (warped) views of the evaluation scenarios so
that a perturbation is judged under the viewpoint variability it will
meet in deployment, and both a seed-prompt and held-out-paraphrase
protocol so prompt overfitting is visible. Every report embeds the
config and seeds it was produced from and regenerates bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import (
    AttackConfig,
    Perturbation,
    advlm_attack,
    fgsm_attack,
    pgd_attack,
)
from .bench import make_dataset, make_predictor, task_score
from .model import (
    ToyVlmConfig,
    ToyVlmWeights,
    attention_map,
    init_weights,
    tokenize,
    train,
)
from .prompts import PromptLibrary
from .rng import Pcg32, stable_stream
from .scene import pcc, sample_affine, ssim, warp_sequence

# large-scale reference values quoted in reports for context: attention
# similarity (ssim, pcc) before and after attack, and score-drop rows
# under growing paraphrase counts (method vs plain pgd)
ATTENTION_REFERENCE = {
    "before": {"ssim": 88.70, "pcc": 88.27},
    "after": {"ssim": 26.74, "pcc": 14.58},
}
PARAPHRASE_DROP_REFERENCE = {
    "seed": {"advlm": 16.97, "pgd": 14.06},
    "para3": {"advlm": 11.01, "pgd": 7.65},
    "para5": {"advlm": 6.62, "pgd": 1.67},
}

METHODS = ("advlm", "pgd", "fgsm", "none")


def train_victim(
    train_scenarios,
    vocab,
    seed: int,
    config: ToyVlmConfig | None = None,
    epochs: int = 50,
    lr: float = 0.1,
    batch_size: int = 8,
    min_train_acc: float = 0.9,
    max_restarts: int = 3,
):
    """Standard victim-preparation recipe: SGD with deterministic random
    restarts when a run stalls below ``min_train_acc`` on its own
    training split. Returns (weights, info dict)."""
    config = config or ToyVlmConfig()
    dataset = make_dataset(train_scenarios, vocab)
    weights, losses, train_acc, attempt = None, [], 0.0, 0
    for attempt in range(max_restarts):
        weights = init_weights(config, vocab, Pcg32(seed, stable_stream(f"init:{attempt}")))
        weights.train_seed = seed
        weights, losses = train(
            weights, dataset, epochs, lr, Pcg32(seed, stable_stream(f"shuffle:{attempt}")), batch_size
        )
        train_acc = task_score(make_predictor(weights), train_scenarios) / 100.0
        if train_acc >= min_train_acc:
            break
    return weights, {
        "attempts": attempt + 1,
        "losses": losses,
        "train_acc": train_acc,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
    }


@dataclass
class EvalProtocol:
    """How attacked scenarios are scored."""

    views_per_scenario: int = 3
    paraphrase_ks: tuple = (3, 5)
    eval_seed: int = 1

    def to_dict(self):
        return {
            "views_per_scenario": self.views_per_scenario,
            "paraphrase_ks": list(self.paraphrase_ks),
            "eval_seed": self.eval_seed,
        }


@dataclass
class EvalReport:
    benchmark: str
    benchmark_seed: int
    config: dict
    protocol: dict
    methods: dict = field(default_factory=dict)  # name -> {mode: {clean, attacked, drop}}
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "benchmark": self.benchmark,
            "benchmark_seed": self.benchmark_seed,
            "config": self.config,
            "protocol": self.protocol,
            "methods": self.methods,
            "rows": self.rows,
            "extra": self.extra,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        ident = json.dumps(
            {
                "benchmark": self.benchmark,
                "benchmark_seed": self.benchmark_seed,
                "config": self.config,
                "protocol": self.protocol,
                "methods": sorted(self.methods),
            },
            sort_keys=True,
        )
        return hashlib.sha256(ident.encode("utf-8")).hexdigest()

    def save(self, out_root) -> Path:
        run_dir = Path(out_root) / f"run-{self.config_hash()[:12]}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with open(run_dir / "rows.csv", "w", encoding="utf-8") as fh:
            fh.write("scenario,method,mode,view,correct\n")
            for row in self.rows:
                fh.write(
                    f"{row['scenario']},{row['method']},{row['mode']},"
                    f"{row['view']},{row['correct']!r}\n"
                )
        return run_dir


def _view_frames(scenario, view: int, protocol: EvalProtocol, ranges) -> np.ndarray:
    """Evaluation re-renders the scenario from shifted viewpoints; every
    view is a fresh warp, deterministic per (scenario, view, eval seed)."""
    rng = Pcg32(protocol.eval_seed, stable_stream(f"view:{scenario.id}:{view}"))
    params = [sample_affine(rng, ranges) for _ in range(len(scenario.seq))]
    return warp_sequence(scenario.seq.frames, params)


def craft_delta(method: str, scenario, weights: ToyVlmWeights, library, cfg: AttackConfig) -> Perturbation:
    rng = Pcg32(cfg.seed, stable_stream(f"attack:{scenario.id}"))
    if method == "advlm":
        pert, _ = advlm_attack(scenario, library, weights, cfg, rng)
    elif method == "pgd":
        pert, _ = pgd_attack(scenario, scenario.prompt, weights, cfg, rng)
    elif method == "fgsm":
        pert = fgsm_attack(scenario, scenario.prompt, weights, cfg)
    elif method == "none":
        pert = Perturbation(np.zeros(scenario.seq.frame_shape), cfg.epsilon)
    else:
        raise ValueError(f"unknown attack method {method!r}")
    return pert


def craft_deltas(method: str, scenarios, weights, library, cfg: AttackConfig, jobs: int = 1) -> dict:
    """Per-scenario perturbations; parallel crafting merges deterministically."""
    if jobs <= 1:
        return {s.id: craft_delta(method, s, weights, library, cfg) for s in scenarios}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {s.id: pool.submit(craft_delta, method, s, weights, library, cfg) for s in scenarios}
    return {sid: futures[sid].result() for sid in sorted(futures)}


def _mode_list(protocol: EvalProtocol) -> list:
    return ["seed"] + [f"para{k}" for k in protocol.paraphrase_ks]


def _score_mode(predictor, scenarios, mode: str, frames_by_sid, protocol: EvalProtocol) -> float:
    if mode == "seed":
        return task_score(predictor, scenarios, "seed", frames_override=frames_by_sid)
    k = int(mode[4:])
    return task_score(
        predictor,
        scenarios,
        "paraphrase",
        k=k,
        eval_seed=protocol.eval_seed,
        frames_override=frames_by_sid,
    )


def run_attack_eval(
    methods,
    scenarios,
    weights: ToyVlmWeights,
    library: PromptLibrary | None,
    cfg: AttackConfig,
    protocol: EvalProtocol | None = None,
    benchmark: str = "toy",
    benchmark_seed: int = 0,
    jobs: int = 1,
) -> EvalReport:
    """Craft one delta per scenario per method and score seed-prompt and
    paraphrase modes over the evaluation views. Drop = clean - attacked."""
    protocol = protocol or EvalProtocol()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown attack method {m!r}")
    if "advlm" in methods and library is None:
        raise ValueError("the advlm method needs a prompt library")
    predictor = make_predictor(weights)
    modes = _mode_list(protocol)
    n_views = protocol.views_per_scenario
    views = {
        s.id: [_view_frames(s, v, protocol, cfg.ranges) for v in range(n_views)]
        for s in scenarios
    }

    clean_scores = {
        mode: float(
            np.mean(
                [
                    _score_mode(predictor, scenarios, mode, {sid: views[sid][v] for sid in views}, protocol)
                    for v in range(n_views)
                ]
            )
        )
        for mode in modes
    }

    report = EvalReport(
        benchmark=benchmark,
        benchmark_seed=benchmark_seed,
        config=cfg.to_dict(),
        protocol=protocol.to_dict(),
        extra={"paraphrase_drop_reference": PARAPHRASE_DROP_REFERENCE},
    )
    for method in methods:
        deltas = craft_deltas(method, scenarios, weights, library, cfg, jobs=jobs)
        per_mode = {}
        for mode in modes:
            attacked_scores = []
            for v in range(n_views):
                frames_by_sid = {
                    sid: np.clip(views[sid][v] + deltas[sid].delta[None], 0.0, 1.0)
                    for sid in views
                }
                attacked_scores.append(
                    _score_mode(predictor, scenarios, mode, frames_by_sid, protocol)
                )
            attacked = float(np.mean(attacked_scores))
            per_mode[mode] = {
                "clean": clean_scores[mode],
                "attacked": attacked,
                "drop": clean_scores[mode] - attacked,
            }
        report.methods[method] = per_mode
        for s in scenarios:
            for v in range(n_views):
                frames = np.clip(views[s.id][v] + deltas[s.id].delta[None], 0.0, 1.0)
                correct = int(predictor(frames, s.prompt) == s.label)
                report.rows.append(
                    {
                        "scenario": s.id,
                        "method": method,
                        "mode": "seed",
                        "view": v,
                        "correct": correct,
                    }
                )
    return report


def attention_divergence(
    weights: ToyVlmWeights,
    scenarios,
    deltas: dict,
    library: PromptLibrary,
    prompt_width: int = 3,
    extra_views: int = 2,
    eval_seed: int = 2,
    ranges=None,
) -> dict:
    """Mean pairwise attention-map similarity across library prompts and
    warped views, before and after applying each scenario's delta."""
    from .scene import TransformRanges

    ranges = ranges or TransformRanges()
    rows = []
    for s in scenarios:
        texts = library.select_for_prompt(s.prompt)[:prompt_width]
        ids_list = [tokenize(t, weights.vocab) for t in texts]
        base = s.seq.frames[0]
        views = [base]
        for v in range(extra_views):
            rng = Pcg32(eval_seed, stable_stream(f"amap:{s.id}:{v}"))
            views.append(warp_sequence(base[None], [sample_affine(rng, ranges)])[0])
        delta = deltas[s.id].delta

        def _pairwise(frames_list):
            maps = [
                attention_map(weights, f, ids) for f in frames_list for ids in ids_list
            ]
            s_vals, p_vals = [], []
            for i in range(len(maps)):
                for j in range(i + 1, len(maps)):
                    s_vals.append(ssim(maps[i], maps[j]))
                    p_vals.append(pcc(maps[i], maps[j]))
            return float(np.mean(s_vals)), float(np.mean(p_vals))

        before_ssim, before_pcc = _pairwise(views)
        after_views = [np.clip(f + delta, 0.0, 1.0) for f in views]
        after_ssim, after_pcc = _pairwise(after_views)
        rows.append(
            {
                "scenario": s.id,
                "before_ssim": before_ssim,
                "before_pcc": before_pcc,
                "after_ssim": after_ssim,
                "after_pcc": after_pcc,
                "before_sim": 0.5 * (before_ssim + before_pcc),
                "after_sim": 0.5 * (after_ssim + after_pcc),
            }
        )
    summary = {
        key: float(np.mean([r[key] for r in rows]))
        for key in (
            "before_ssim",
            "before_pcc",
            "after_ssim",
            "after_pcc",
            "before_sim",
            "after_sim",
        )
    }
    decreased = sum(1 for r in rows if r["after_sim"] < r["before_sim"])
    return {
        "rows": rows,
        "summary": summary,
        "decreased_fraction": decreased / len(rows) if rows else float("nan"),
        "reference": ATTENTION_REFERENCE,
    }


def transfer_eval(
    source_weights: ToyVlmWeights,
    victim_weights: ToyVlmWeights,
    scenarios,
    library: PromptLibrary,
    cfg: AttackConfig,
    methods=("advlm", "pgd"),
    protocol: EvalProtocol | None = None,
    benchmark: str = "toy",
    benchmark_seed: int = 0,
    allow_identical: bool = False,
    jobs: int = 1,
) -> EvalReport:
    """Craft on the source model, score on the victim (black-box transfer)."""
    if not allow_identical and source_weights.train_seed == victim_weights.train_seed:
        raise ValueError(
            "source and victim were trained with the same seed; transfer needs "
            "independently trained models"
        )
    protocol = protocol or EvalProtocol()
    predictor = make_predictor(victim_weights)
    modes = _mode_list(protocol)
    n_views = protocol.views_per_scenario
    views = {
        s.id: [_view_frames(s, v, protocol, cfg.ranges) for v in range(n_views)]
        for s in scenarios
    }
    clean_scores = {
        mode: float(
            np.mean(
                [
                    _score_mode(predictor, scenarios, mode, {sid: views[sid][v] for sid in views}, protocol)
                    for v in range(n_views)
                ]
            )
        )
        for mode in modes
    }
    report = EvalReport(
        benchmark=benchmark,
        benchmark_seed=benchmark_seed,
        config={**cfg.to_dict(), "transfer": True},
        protocol=protocol.to_dict(),
    )
    for method in methods:
        deltas = craft_deltas(method, scenarios, source_weights, library, cfg, jobs=jobs)
        per_mode = {}
        for mode in modes:
            attacked = float(
                np.mean(
                    [
                        _score_mode(
                            predictor,
                            scenarios,
                            mode,
                            {
                                sid: np.clip(views[sid][v] + deltas[sid].delta[None], 0.0, 1.0)
                                for sid in views
                            },
                            protocol,
                        )
                        for v in range(n_views)
                    ]
                )
            )
            per_mode[mode] = {
                "clean": clean_scores[mode],
                "attacked": attacked,
                "drop": clean_scores[mode] - attacked,
            }
        report.methods[method] = per_mode
    return report


ABLATION_GRIDS = {
    "steps": (3, 5, 10, 20, 50, 100),
    "budget": (0.01, 0.02, 0.05, 0.1, 0.2, 0.4),
    "prompts": (1, 2, 3, 4, 5),
    "lambda": tuple(round(0.1 * i, 1) for i in range(1, 10)),
    "frames": tuple(range(1, 17)),
    "sae": ("on", "off"),
}


def ablation_config(axis: str, value, base: AttackConfig) -> AttackConfig:
    if axis == "steps":
        return replace(base, steps=int(value), alpha=None)
    if axis == "budget":
        return replace(base, epsilon=float(value), alpha=None)
    if axis == "prompts":
        return replace(base, prompt_width=int(value))
    if axis == "lambda":
        return replace(base, lam=float(value))
    if axis == "frames":
        return replace(base, pivotal_frames=int(value))
    if axis == "sae":
        if value == "on":
            return base
        if value == "off":
            return replace(base, identity_transforms=True, lam=0.0)
        raise ValueError(f"sae axis takes on/off, got {value!r}")
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablation_sweep(
    axis: str,
    values,
    scenarios,
    weights: ToyVlmWeights,
    library: PromptLibrary,
    base_cfg: AttackConfig,
    protocol: EvalProtocol | None = None,
    out_csv=None,
    jobs: int = 1,
) -> list:
    """One attack-eval per axis value; returns [(value, seed-mode drop)]."""
    if axis not in ABLATION_GRIDS:
        raise ValueError(f"unknown ablation axis {axis!r}")
    if values is None:
        values = ABLATION_GRIDS[axis]
    if axis == "frames":
        cap = max(len(s.seq) for s in scenarios)
        values = [v for v in values if v <= cap]
    protocol = protocol or EvalProtocol()
    results = []
    for value in values:
        cfg = ablation_config(axis, value, base_cfg)
        report = run_attack_eval(
            ["advlm"], scenarios, weights, library, cfg, protocol, jobs=jobs
        )
        drop = report.methods["advlm"]["seed"]["drop"]
        results.append((value, drop))
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write(f"{axis},drop\n")
            for value, drop in results:
                fh.write(f"{value},{drop!r}\n")
    return results
