"""Mean error of the model and both baselines, overall and on mobile users.

Regenerates the synthetic world from a run configuration (defaults, then
``--config``, then ``key=value`` overrides) and prints one row per
(p, seed). ``--no-model`` skips training and prints only the baselines.

    python scripts/compare_baselines.py --p 0.9 --seeds 1,2,3
    python scripts/compare_baselines.py --no-model community_center_std_km=40
"""

import argparse
import time

import numpy as np

from geoleak import evaluation as ev
from geoleak import geosn, neural, synth
from geoleak.config import parse_ints, resolve
from geoleak.graph import normalized_laplacian


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--p", default="0.9", help="comma-separated p values")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--no-model", action="store_true")
    ap.add_argument("overrides", nargs="*", help="run-config key=value pairs")
    args = ap.parse_args()

    cfg = resolve(args.config, dict(kv.split("=", 1) for kv in args.overrides))
    scfg = cfg.synth_config()
    graph, models, tweets = synth.generate(scfg)
    seq = geosn.discretize(tweets, scfg.t_start, scfg.slot_duration_s, scfg.n_slots, scfg.n_users)
    mobile = [u for u, m in enumerate(models) if m.kind is synth.MobilityKind.MOBILE]
    op = normalized_laplacian(graph)

    names = ["last_known", "friend_centroid"] + ([] if args.no_model else ["model"])
    print("p,seed," + ",".join(f"{n}_km,{n}_mobile_km" for n in names) + ",seconds")
    for p in (float(v) for v in args.p.split(",")):
        table = {n: [] for n in names}
        for seed in parse_ints(args.seeds):
            start = time.perf_counter()
            run = ev.prepare_run(seq, p, seed, cfg.n_ts, cfg.mode)
            centroid = ev.training_centroid(seq, run.splits, run.norm)
            predictors = {
                "last_known": ev.baseline_last_known(run.examples, centroid),
                "friend_centroid": ev.baseline_friend_centroid(run.examples, graph, centroid),
            }
            if not args.no_model:
                result = neural.train(run.examples, op, cfg.model_config(seed))
                predictors["model"] = ev.model_predictor(result.params, cfg.model_config(seed), op)
            row = []
            for n in names:
                rep = ev.evaluate(predictors[n], run.examples, seq, run.norm)
                pair = (rep.mean_km, ev.subset_mean_km(rep, mobile))
                table[n].append(pair)
                row += [f"{v:.3f}" for v in pair]
            print(f"{p:g},{seed}," + ",".join(row) + f",{time.perf_counter() - start:.1f}", flush=True)
        means = [f"{v:.3f}" for n in names for v in np.mean(table[n], axis=0)]
        print(f"{p:g},mean," + ",".join(means) + ",")


if __name__ == "__main__":
    main()
