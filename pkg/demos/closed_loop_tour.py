"""A walk through the threshold feedback loop.

First on the linear plant stub, where the error contracts by exactly
|1 - beta * lambda| per frame, then on the calibrated simulator, where the
measured hallucination rate is noisy but still settles at the setpoint.
"""

import numpy as np

from halluguard.controller import ControllerConfig, iterate_plant, stability_analysis
from halluguard.simworld import LinearPlant, calibrated_config, closed_loop_run, estimate_sensitivity

# %% linear stub: h(tau) = 0.1 + 0.1 * (0.5 - tau)
beta, gain = 0.1, 0.05
plant = LinearPlant(beta, tau_star=0.5)
for lam in (0.05, 10.0, 20.0, 25.0):
    rep = stability_analysis(beta, lam, 0.18, 0.01)
    hist = iterate_plant(plant, lam, 0.1, 0.5 - 0.18 / beta, 60)
    print(
        f"lambda={lam:<5} loop gain={rep.loop_gain:<5g} {rep.classification.value:<9}"
        f" predicted frames to |e|<=0.01: {rep.predicted_frames_to_eps}  |e_60|={abs(hist[-1].e_t):.3g}"
    )

# %% the calibrated simulator as a plant
cfg = calibrated_config()
est = estimate_sensitivity(cfg, (0.4, 0.45, 0.5, 0.55, 0.6), 1000)
print("\nopen-loop h(tau) on the simulator")
print(est.table())
print(f"beta_hat = {est.beta_hat:.4f}, steepest local slope = {est.lipschitz_hat:.4f}")

# %% closing the loop
tr = closed_loop_run(cfg, ControllerConfig(gain=gain, h_target=0.1), 2000)
print(f"\nclosed loop, 2000 frames: tau 0.5 -> {tr.tau_after[-1]:.3f}")
print(f"mean h_t over the last 300 frames: {tr.tail_mean_h(300):.4f}")
print(f"frames until the 200-frame mean error stays within 0.03: {tr.frames_to_converge()}")
for t in (0, 100, 500, 1000, 1999):
    print(f"  t={t:<5} tau={tr.tau[t]:.3f}  h_t={tr.h_t[t]:.3f}")

# %% high grounding implies low hallucination, frame by frame
mask = tr.gamma > 0.85
print(f"\nframes with gamma > 0.85: {mask.sum()}, max h among them: {tr.h_frame[mask].max():.4f}")
print(f"h == 1 - gamma on every frame: {bool(np.all(tr.h_frame == 1.0 - tr.gamma))}")
