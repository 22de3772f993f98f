"""Semantic-invariant prompt library.

Paraphrase candidates come from a pluggable generator backend: a
deterministic rules backend driven by a bundled phrase-substitution
table, or an HTTP client for a chat-completions endpoint. Candidates
are scored by semantic entropy (uncertainty of a reference model's
mean response over probe scenes) plus an embedding-diversity term, and
the lowest-penalty variants per seed form the library.

The substitution table is split into two disjoint partitions so that
evaluation-time paraphrases never reuse attack-time wordings.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from itertools import combinations, product

import numpy as np

from .model import ToyVlmWeights, forward, tokenize
from .rng import Pcg32, stable_stream

EMBED_DIM = 50

# phrase -> alternatives; even indices feed the "attack" partition,
# odd indices the held-out "eval" partition
SYNONYM_TABLE = {
    "at the intersection": (
        "ahead",
        "at the crossing",
        "at the junction",
        "at the crossroads",
    ),
    "at the junction": (
        "at the intersection",
        "at the crossing",
        "ahead",
        "at the crossroads",
    ),
    "at the marker": (
        "at the sign",
        "near the marker",
        "by the marker",
        "at the beacon",
    ),
    "at the signal": (
        "at the light",
        "at the traffic signal",
        "near the signal",
        "by the light",
    ),
    "the vehicle": ("the car", "the auto", "the automobile", "the truck"),
    "the car": ("the vehicle", "the auto", "the automobile", "the van"),
    "what should": ("what must", "what ought", "what shall", "what needs"),
    "choose": ("pick", "select", "settle on", "determine"),
    "decide": ("determine", "resolve", "fix", "judge"),
    "select": ("choose", "pick", "opt for", "settle on"),
    "take": ("perform", "execute", "carry out", "make"),
    "tell me": ("give me", "state", "report", "describe"),
    "the next action": (
        "the next move",
        "the following action",
        "the upcoming action",
        "the next step",
    ),
    "maneuver": ("move", "action", "operation", "motion"),
    "the correct": ("the right", "the proper", "the appropriate", "the suitable"),
    "the proper": ("the correct", "the appropriate", "the right", "the fitting"),
    "the right": ("the correct", "the proper", "the best", "the appropriate"),
    "now": ("right now", "at once", "immediately", "at this moment"),
    "ahead": ("up ahead", "in front", "on the road ahead", "before us"),
}

TEMPLATE_WRAPS = ("please {}", "{} please", "kindly {}")

_WORD_RE = re.compile(r"[a-z0-9]+")


def table_words() -> list:
    """Every word occurring in the substitution machinery, sorted."""
    words = set()
    for key, alts in SYNONYM_TABLE.items():
        for phrase in (key, *alts):
            words.update(_WORD_RE.findall(phrase))
    for wrap in TEMPLATE_WRAPS:
        words.update(_WORD_RE.findall(wrap.replace("{}", " ")))
    return sorted(words)


class PromptBackendError(RuntimeError):
    """Variant generation failed; carries the raw response body if any."""

    def __init__(self, message, body=""):
        super().__init__(message)
        self.body = body


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def _partition_alts(alts, partition: str):
    if partition == "attack":
        return alts[0::2]
    if partition == "eval":
        return alts[1::2]
    if partition == "all":
        return tuple(alts)
    raise ValueError(f"unknown partition {partition!r}")


def _find_matches(text: str, keys) -> list:
    """Non-overlapping phrase occurrences, longest key first, by position."""
    taken = []
    matches = []
    for key in sorted(keys, key=lambda k: (-len(k), k)):
        for m in re.finditer(rf"\b{re.escape(key)}\b", text):
            span = (m.start(), m.end())
            if any(not (span[1] <= lo or span[0] >= hi) for lo, hi in taken):
                continue
            taken.append(span)
            matches.append((m.start(), m.end(), key))
    matches.sort()
    return matches


def _substitute(text: str, replacements) -> str:
    """Apply (start, end, new_text) replacements, right to left."""
    out = text
    for start, end, new in sorted(replacements, reverse=True):
        out = out[:start] + new + out[end:]
    return out


class RulesBackend:
    """Deterministic paraphraser over the bundled substitution table."""

    def __init__(self, partition: str = "attack"):
        self.partition = partition
        self.name = f"rules:{partition}"

    def generate(self, seed_prompt: str, count: int, rng: Pcg32) -> list:
        seed = _normalize(seed_prompt)
        matches = _find_matches(seed, SYNONYM_TABLE.keys())
        options = [
            (start, end, _partition_alts(SYNONYM_TABLE[key], self.partition))
            for start, end, key in matches
        ]
        options = [(s, e, alts) for s, e, alts in options if alts]

        singles = []
        for s, e, alts in options:
            for alt in alts:
                singles.append(_substitute(seed, [(s, e, alt)]))

        tail = []
        for take in (2, 3):
            if len(options) < take:
                break
            for combo in combinations(options, take):
                for alts in product(*[c[2] for c in combo]):
                    reps = [(c[0], c[1], a) for c, a in zip(combo, alts)]
                    tail.append(_substitute(seed, reps))
                    if len(tail) > 40 * max(count, 1):
                        break
        for wrap in TEMPLATE_WRAPS:
            tail.append(wrap.format(seed))
        for text in list(singles[: max(count, 8)]):
            for wrap in TEMPLATE_WRAPS:
                tail.append(wrap.format(text))

        rng.shuffle(tail)
        out, seen = [], {seed}
        for cand in singles + tail:
            if cand in seen:
                continue
            seen.add(cand)
            out.append(cand)
            if len(out) == count:
                break
        return out


class HttpBackend:
    """Chat-completions client; one variant per line of the reply."""

    def __init__(self, endpoint: str, model: str = "default", key_env: str = "ADVLM_LLM_KEY", timeout: float = 30.0):
        self.endpoint = endpoint
        self.model = model
        self.key_env = key_env
        self.timeout = timeout
        self.name = "http"

    def generate(self, seed_prompt: str, count: int, rng: Pcg32) -> list:
        request = {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": (
                        f"Rewrite the driving instruction below {count} times, "
                        "keeping the exact same meaning but varying the wording. "
                        "Reply with one rewrite per line and nothing else.\n"
                        f"Instruction: {seed_prompt}"
                    ),
                }
            ],
        }
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            self.endpoint, data=json.dumps(request).encode("utf-8"), headers=headers
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8", errors="replace")
        except urllib.error.HTTPError as exc:
            raw = exc.read().decode("utf-8", errors="replace")
            raise PromptBackendError(
                f"endpoint returned HTTP {exc.code}", body=raw
            ) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise PromptBackendError(f"endpoint unreachable: {exc}") from exc
        try:
            payload = json.loads(body)
            content = payload["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise PromptBackendError(
                f"malformed completion response: {exc}", body=body
            ) from exc
        seed = _normalize(seed_prompt)
        out, seen = [], {seed}
        for line in content.splitlines():
            text = _normalize(re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line))
            if not text or text in seen:
                continue
            seen.add(text)
            out.append(text)
            if len(out) == count:
                break
        return out


def make_backend(spec: str, endpoint: str = "", partition: str = "attack"):
    if spec == "rules":
        return RulesBackend(partition=partition)
    if spec == "http":
        if not endpoint:
            raise ValueError("http backend requires an endpoint URL")
        return HttpBackend(endpoint)
    raise ValueError(f"unknown backend {spec!r}")


def generate_variants(seed_prompt: str, count: int, backend, rng: Pcg32) -> list:
    """Paraphrase candidates, deduplicated, never echoing the seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return backend.generate(seed_prompt, count, rng)


class EmbeddingTable:
    """Word -> unit vector map with a deterministic hash fallback."""

    def __init__(self, vectors: dict):
        self.vectors = {}
        for word, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            norm = np.linalg.norm(arr)
            if norm <= 0:
                raise ValueError(f"zero-norm embedding for {word!r}")
            self.vectors[word] = arr / norm
        self._oov = {}

    def get(self, word: str) -> np.ndarray:
        if word in self.vectors:
            return self.vectors[word]
        if word not in self._oov:
            rng = Pcg32(stable_stream("oov:" + word))
            vec = rng.normal_block(EMBED_DIM)
            self._oov[word] = vec / np.linalg.norm(vec)
        return self._oov[word]

    @staticmethod
    def from_file(path) -> "EmbeddingTable":
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                vectors[parts[0]] = [float(x) for x in parts[1:]]
        return EmbeddingTable(vectors)

    @staticmethod
    def bundled() -> "EmbeddingTable":
        ref = resources.files("advlm").joinpath("data/embeddings_50d.txt")
        with resources.as_file(ref) as path:
            return EmbeddingTable.from_file(path)


def embed_sentence(text: str, table: EmbeddingTable) -> np.ndarray:
    """Mean word vector renormalized to unit length."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise ValueError("cannot embed empty text")
    mean = np.mean([table.get(w) for w in words], axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("degenerate sentence embedding (zero mean vector)")
    return mean / norm


def diversity(t: str, t_i: str, table: EmbeddingTable) -> float:
    """One minus cosine similarity of the sentence embeddings; in [0, 2]."""
    a = embed_sentence(t, table)
    b = embed_sentence(t_i, table)
    cos = float(np.clip(np.dot(a, b), -1.0, 1.0))
    return 1.0 - cos


def entropy(dist) -> float:
    """Shannon entropy (natural log) of a probability vector."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def semantic_entropy(text: str, weights: ToyVlmWeights, probe_frames) -> float:
    """Entropy of the reference model's mean response over the probe set."""
    if not probe_frames:
        raise ValueError("probe set must be non-empty")
    ids = tokenize(text, weights.vocab)
    mean = np.mean([forward(weights, seq, ids).probs for seq in probe_frames], axis=0)
    return entropy(mean)


def penalty_score(se: float, d: float, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return se + beta * d


def penalty(
    t: str,
    t_i: str,
    beta: float,
    table: EmbeddingTable,
    weights: ToyVlmWeights,
    probe_frames,
) -> float:
    """Variant penalty: semantic entropy plus beta-weighted diversity."""
    se = semantic_entropy(t_i, weights, probe_frames)
    d = diversity(t, t_i, table)
    return penalty_score(se, d, beta)


@dataclass
class PromptVariant:
    text: str
    se: float
    d: float
    b: float


@dataclass
class LibraryEntry:
    seed_id: str
    seed: str
    variants: list


@dataclass
class PromptLibrary:
    beta: float
    backend_id: str
    entries: dict  # seed_id -> LibraryEntry

    def select(self, seed_id: str) -> list:
        """Seed text followed by its variants, best penalty first."""
        if seed_id not in self.entries:
            raise KeyError(f"unknown seed id {seed_id!r}")
        entry = self.entries[seed_id]
        return [entry.seed] + [v.text for v in entry.variants]

    def select_for_prompt(self, prompt: str) -> list:
        norm = _normalize(prompt)
        for entry in self.entries.values():
            if entry.seed == norm:
                return self.select(entry.seed_id)
        raise KeyError(f"no library entry for prompt {prompt!r}")

    def save(self, path) -> None:
        doc = {
            "beta": self.beta,
            "backend": self.backend_id,
            "entries": [
                {
                    "seed_id": e.seed_id,
                    "seed": e.seed,
                    "variants": [
                        {"text": v.text, "se": v.se, "d": v.d, "b": v.b}
                        for v in e.variants
                    ],
                }
                for e in self.entries.values()
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path) -> "PromptLibrary":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        entries = {}
        for e in doc["entries"]:
            entries[e["seed_id"]] = LibraryEntry(
                seed_id=e["seed_id"],
                seed=e["seed"],
                variants=[
                    PromptVariant(v["text"], v["se"], v["d"], v["b"])
                    for v in e["variants"]
                ],
            )
        return PromptLibrary(beta=doc["beta"], backend_id=doc["backend"], entries=entries)


class LibraryBuildError(RuntimeError):
    pass


def build_library(
    seeds,
    width: int,
    beta: float,
    backend,
    weights: ToyVlmWeights,
    probe_frames,
    rng: Pcg32,
    table: EmbeddingTable | None = None,
    oversample: int = 3,
) -> PromptLibrary:
    """Score oversampled candidates per seed and keep the ``width`` with
    the smallest penalty, ties broken lexicographically by text.

    ``seeds`` is an iterable of (seed_id, seed_text) pairs.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if oversample < 3:
        raise ValueError("oversample factor must be >= 3")
    table = table or EmbeddingTable.bundled()
    entries = {}
    for seed_id, seed_text in seeds:
        seed_text = _normalize(seed_text)
        cands = generate_variants(seed_text, oversample * width, backend, rng)
        if len(cands) < width:
            raise LibraryBuildError(
                f"seed {seed_id!r} produced only {len(cands)} unique candidates, "
                f"need {width}"
            )
        scored = []
        for text in cands:
            se = semantic_entropy(text, weights, probe_frames)
            d = diversity(seed_text, text, table)
            scored.append(PromptVariant(text=text, se=se, d=d, b=penalty_score(se, d, beta)))
        scored.sort(key=lambda v: (v.b, v.text))
        entries[seed_id] = LibraryEntry(seed_id, seed_text, scored[:width])
    return PromptLibrary(beta=beta, backend_id=backend.name, entries=entries)
