"""Two-stage pipelining: detection of frame t+1 overlaps description of frame t.

With injected stage delays of 20 ms and 30 ms the serial loop needs about
50 ms per frame; the pipelined loop is bound by the slower stage plus the
fixed overhead alpha.
"""

from halluguard.pipeline import PipelineConfig, run_stream
from halluguard.simworld import SimDetector, SimGenerator, calibrated_config, frames

cfg = calibrated_config(seed=1)
for det_ms, gen_ms in ((20, 30), (30, 20)):
    for pipelined in (True, False):
        pcfg = PipelineConfig(detect_delay_s=det_ms / 1e3, generate_delay_s=gen_ms / 1e3, pipelined=pipelined)
        rep = run_stream(frames(cfg, 100), SimDetector(cfg), SimGenerator(cfg), pcfg)
        model = (max(det_ms, gen_ms) if pipelined else det_ms + gen_ms) + 0.1
        mode = "pipelined" if pipelined else "serial   "
        print(
            f"detect {det_ms} ms, describe {gen_ms} ms, {mode}: {rep.steady_frame_ms:6.2f} ms/frame"
            f" (model {model:.1f}), final tau {rep.final_tau:.3f}"
        )
