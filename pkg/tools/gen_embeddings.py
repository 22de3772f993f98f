"""Regenerate the bundled 50-dim word embedding table.

Words that appear together in one substitution family share a base
direction, so synonym swaps move a sentence embedding less than
cross-family edits. Output is deterministic; run from the repo root:

    python tools/gen_embeddings.py
"""

import pathlib
import re
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from advlm.bench import PROMPT_TEMPLATES  # noqa: E402
from advlm.model import RESPONSE_CLASSES  # noqa: E402
from advlm.prompts import EMBED_DIM, SYNONYM_TABLE, table_words  # noqa: E402
from advlm.rng import Pcg32, stable_stream  # noqa: E402

_WORD_RE = re.compile(r"[a-z0-9]+")


def unit(vec):
    return vec / np.linalg.norm(vec)


def main():
    family_of = {}
    for key in sorted(SYNONYM_TABLE):
        members = set(_WORD_RE.findall(key))
        for alt in SYNONYM_TABLE[key]:
            members.update(_WORD_RE.findall(alt))
        for word in members:
            family_of.setdefault(word, key)

    words = set(table_words())
    for template in PROMPT_TEMPLATES:
        words.update(_WORD_RE.findall(template))
    words.update(RESPONSE_CLASSES)

    lines = []
    for word in sorted(words):
        family = family_of.get(word, "solo:" + word)
        base = Pcg32(stable_stream("family:" + family)).normal_block(EMBED_DIM)
        noise = Pcg32(stable_stream("word:" + word)).normal_block(EMBED_DIM)
        vec = unit(unit(base) + 0.45 * unit(noise))
        lines.append(word + " " + " ".join(f"{x:.6f}" for x in vec))

    out = pathlib.Path(__file__).resolve().parents[1] / "src/advlm/data/embeddings_50d.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} words to {out}")


if __name__ == "__main__":
    main()
