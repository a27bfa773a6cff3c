"""How the simulator calibration fixture was chosen.

The simulator's default Beta(8, 2) / Beta(2, 5) confidences separate true and
false positives so well that the hallucination rate barely moves with the
threshold near tau = 0.5: the loop would have almost nothing to steer. This
script searches a small grid of detector noise settings for a plant that

* falls with the threshold at roughly 0.1 per unit tau around tau = 0.5,
  on every seed tried, not just on average,
* starts above h = 0.1 at tau = 0.5 and can be driven down to it at a
  threshold below 0.8, and
* still sits above 0.1 at tau_max = 0.95 when the generator is noisy
  (free-form prompting), so the adaptive controller has visible work to do.

Run it with ``python demos/calibrate_simulator.py``; pass ``--write PATH`` to
emit an INI fixture for the best candidate.
"""

import argparse
import configparser
import itertools
import sys

import numpy as np

from halluguard.simworld import SimWorldConfig, open_loop_h

TP = [(8.0, 2.0), (20.0, 1.0)]
FP = [(2.0, 5.0), (5.0, 3.0), (8.0, 3.0)]
RATE = [0.5, 0.65, 0.8]
FREE_FORM = 0.25


def h_at(cfg, tau, n):
    return float(open_loop_h(cfg, tau, n).mean())


def evaluate(cfg, n):
    lo, mid, hi = (h_at(cfg, t, n) for t in (0.45, 0.5, 0.55))
    beta = abs(hi - lo) / 0.1
    h80 = h_at(cfg, 0.8, n)
    floor = h_at(SimWorldConfig(**{**cfg.__dict__, "gen_base_halluc": FREE_FORM}), 0.95, n)
    return {"beta_hat": beta, "h@0.5": mid, "h@0.8": h80, "free-form h@0.95": floor}


ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--frames", type=int, default=1000, help="frames per open-loop point")
ap.add_argument("--write", metavar="PATH", help="write the best candidate as an INI fixture")
args = ap.parse_args()

rows = []
for tp, fp, rate in itertools.product(TP, FP, RATE):
    cfg = SimWorldConfig(tp_conf=tp, fp_conf=fp, fp_rate=rate)
    m = evaluate(cfg, args.frames)
    feasible = m["h@0.5"] >= 0.1 and m["h@0.8"] <= 0.1 and m["free-form h@0.95"] > 0.1
    rows.append((cfg, m, feasible))
    flag = "*" if feasible else " "
    print(f"{flag} tp={tp} fp={fp} rate={rate:<5}" + "".join(f"  {k}={v:.4f}" for k, v in m.items()))

feasible = [(c, m) for c, m, ok in rows if ok]
if not feasible:
    sys.exit("no candidate meets the reachability constraints")

# the slope is a finite difference of noisy means, so rank by the worst seed
print("\nslope across seeds 0-2 for feasible candidates:")
scored = []
for cfg, m in feasible:
    betas = [m["beta_hat"]] + [
        evaluate(SimWorldConfig(**{**cfg.__dict__, "seed": s}), args.frames)["beta_hat"] for s in (1, 2)
    ]
    worst = max(abs(b - 0.1) for b in betas)
    scored.append((worst, cfg, betas))
    print(f"  tp={cfg.tp_conf} fp={cfg.fp_conf} rate={cfg.fp_rate:<5} beta_hat={np.round(betas, 4).tolist()}")
worst, best, betas = min(scored, key=lambda x: x[0])
print(f"\nbest: tp_conf={best.tp_conf} fp_conf={best.fp_conf} fp_rate={best.fp_rate} (worst |beta_hat - 0.1| = {worst:.4f})")

if args.write:
    ini = configparser.ConfigParser()
    ini["simworld"] = {
        "seed": "0",
        "objects_per_frame": "1, 6",
        "frame_size": "640, 480",
        "tp_conf": ", ".join(f"{v:g}" for v in best.tp_conf),
        "fp_conf": ", ".join(f"{v:g}" for v in best.fp_conf),
        "fp_rate": f"{best.fp_rate:g}",
        "gen_base_halluc": f"{best.gen_base_halluc:g}",
        "tokens_per_description": "5, 12",
        "detect_prob": f"{best.detect_prob:g}",
    }
    ini["ablation"] = {"free_form_halluc": f"{FREE_FORM:g}"}
    with open(args.write, "w", encoding="utf-8") as fh:
        ini.write(fh)
    print(f"wrote {args.write}")
