"""Meta-train on two pairs of synthetic spoofer families, adapt to the fifth with 5 shots.

    python3 demos/few_shot_benchmark.py [--seed N] [--mode pre|prepost] [--quick]

The full schedule takes about 90 s per run on one core; --quick trains for a
fraction of that on a smaller benchmark.
"""
import argparse

import numpy as np

from rffspoof.benchmark import BenchmarkConfig, build_benchmark
from rffspoof.embedder import EncoderConfig, ProtoLearner
from rffspoof.metalearn import MetaConfig, crosstest, meta_train, metrics_from_confusion
from rffspoof.tracking import postcorr_vector_length


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=["pre", "prepost"], default="prepost")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    bench = BenchmarkConfig(cfo_hz=(20.0, 100.0), phase_noise=(0.003, 0.005),
                            segments_per_class=40 if args.quick else 120)
    reg = build_benchmark(bench)
    target = reg["fam5"]
    post_dim = postcorr_vector_length(target.post_shape[0]) if args.mode == "prepost" else 0
    learner = ProtoLearner(EncoderConfig(target.spec_shape, post_dim))
    cfg = MetaConfig(seed=args.seed, feature_mode=args.mode, outer_lr=0.002,
                     steps_per_epoch=5 if args.quick else 25, query_size=30 if args.quick else 50)
    res = meta_train(cfg, reg, ["fam1+fam2", "fam3+fam4"], learner)
    print("meta loss per epoch:", " ".join(f"{v:.3f}" for v in res.loss_history))
    for name, params in (("meta-trained", res.params),
                         ("random init", learner.init_params(np.random.default_rng(999)))):
        ev = crosstest(params, target, 5, cfg, learner, rng=100 + args.seed)
        m = metrics_from_confusion(ev.confusion)
        print(f"{name:13s} accuracy {m['accuracy']:.3f}  F1 {m['f1']:.3f}  query loss {ev.query_loss:.3f}")
        print("              confusion [[TN FP] [FN TP]] =", ev.confusion.tolist())


if __name__ == "__main__":
    main()
