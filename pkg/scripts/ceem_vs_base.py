"""Train tiny base and CEEM models on the synthetic imbalanced set and compare test macro-F1.

    python3 scripts/ceem_vs_base.py --lr 1e-3 --epochs 40 --seeds 1 2 3
"""

import argparse
import time

import numpy as np

from ceemkit.data import SynthSpec, normalize, synth_generate
from ceemkit.graph import build_preset
from ceemkit.metrics import confusion, report
from ceemkit.train import TrainConfig, fit, stratified_split


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--reference", type=float, default=1.0, help="negative-layer reference on normalised inputs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=64)
    a = ap.parse_args()

    ds = synth_generate(SynthSpec(seed=a.data_seed, size=a.size))
    tr, te, va = stratified_split(ds.labels, seed=a.data_seed)
    xt, yt = normalize(ds.images[te]), ds.labels[te]
    tb = ds.class_names.index("TB")
    scores = {"vgg_lite": [], "vgg_lite_ceem": []}
    print(f"train {len(tr)}  test {len(te)}  val {len(va)}  lr {a.lr}  epochs {a.epochs}")
    print("seed  model           macro-F1  TB-recall  train-acc  secs")
    for seed in a.seeds:
        for name in scores:
            kw = {"reference": a.reference} if name == "vgg_lite_ceem" else {}
            g = build_preset(name, "tiny", input_shape=(a.size, a.size, 1), seed=seed, **kw)
            t0 = time.perf_counter()
            res = fit(g, ds.subset(tr), TrainConfig(epochs=a.epochs, lr0=a.lr, seed=seed), val=ds.subset(va))
            rep = report(confusion(yt, g.predict_proba(xt).argmax(axis=1), len(ds.class_names), ds.class_names))
            scores[name].append(rep.macro["f1"])
            print(f"{seed:<6}{name:<16}{rep.macro['f1']:>8.4f}{rep.recall[tb]:>11.3f}"
                  f"{res.log.rows[-1]['train_acc']:>11.3f}{time.perf_counter() - t0:>6.0f}", flush=True)
    for name, v in scores.items():
        print(f"mean macro-F1 {name:<15} {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
