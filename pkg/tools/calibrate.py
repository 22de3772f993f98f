"""One-seed pipeline calibration for benchmark/model design iteration."""

import pathlib
import sys
import tempfile
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from advlm import attack as A, bench as B, harness as H, model as M, prompts as P
from advlm.rng import Pcg32


def run(seed=0, size=120, epochs=40, lr=0.08, batch=1, label=""):
    t_all = time.time()
    tmp = tempfile.mkdtemp()
    man = B.generate_benchmark(Pcg32(seed, 777), size, tmp)
    vocab = B.benchmark_vocabulary()
    train_descs, eval_descs = B.split_descs(man)
    train_sc = [man.load_scenario(d) for d in train_descs]
    eval_sc = [man.load_scenario(d) for d in eval_descs]
    w, info = H.train_victim(train_sc, vocab, seed + 1, epochs=epochs, lr=lr, batch_size=batch)
    losses = info["losses"]
    pred = B.make_predictor(w)
    acc = B.task_score(pred, eval_sc)

    uniq = sorted({s.prompt for s in train_sc})
    probe = [s.seq for s in train_sc[:4]]
    lib = P.build_library(
        [(f"p{i}", t) for i, t in enumerate(uniq)], width=5, beta=0.5,
        backend=P.RulesBackend(), weights=w, probe_frames=probe, rng=Pcg32(seed + 3),
    )
    cfg = A.AttackConfig(seed=seed + 4)
    proto = H.EvalProtocol(views_per_scenario=3, paraphrase_ks=(3, 5), eval_seed=1)
    rep = H.run_attack_eval(["advlm", "pgd"], eval_sc, w, lib, cfg, proto)
    a, p = rep.methods["advlm"], rep.methods["pgd"]
    gap_seed = a["seed"]["drop"] - p["seed"]["drop"]
    gap_p5 = a["para5"]["drop"] - p["para5"]["drop"]
    rec_a = a["seed"]["attacked"] - a["para5"]["attacked"]
    rec_p = p["seed"]["attacked"] - p["para5"]["attacked"]
    print(
        f"[{label} seed={seed}] acc={acc:.0f} viewclean={a['seed']['clean']:.1f} "
        f"loss={losses[-1]:.2f} | att(seed): adv={a['seed']['attacked']:.1f} pgd={p['seed']['attacked']:.1f} | "
        f"rec: adv={-rec_a:+.1f} pgd={-rec_p:+.1f} | "
        f"gap {gap_seed:+.1f} -> {gap_p5:+.1f} | 6a={'Y' if gap_seed >= 0 else 'n'} "
        f"6b={'Y' if gap_p5 > gap_seed else 'n'} | {time.time()-t_all:.0f}s"
    )
    return dict(acc=acc, gap_seed=gap_seed, gap_p5=gap_p5, advlm=a, pgd=p)


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1:]] or [0]
    for s in seeds:
        run(seed=s, label="cal")
