"""Driving the loop through the line-delimited wire protocol.

The bundled mock peer plays an external detector and captioner. It answers
detection requests with the simulator's output and occasionally mentions an
object that is not there, so the token-level grounding check has something
to catch. No truth tags cross the wire.
"""

import sys

from halluguard.adapters import AdapterDetector, AdapterEndpoint, AdapterGenerator, Transport, handshake
from halluguard.grounding import GroundingMode
from halluguard.pipeline import PipelineConfig, run_stream
from halluguard.simworld import calibrated_config, frames

cmd = f"{sys.executable} -m halluguard.adapters.mock_peer --halluc-rate 0.2"
endpoint = AdapterEndpoint(Transport.CHILD_PROCESS, cmd)

shown = []


def sink(res):
    if len(shown) < 3 and res.descriptions:
        shown.append(res)


with handshake(endpoint) as session:
    print(f"peer speaks protocol {session.peer_version}, offers {sorted(session.capabilities)}")
    pcfg = PipelineConfig(grounding_mode=GroundingMode.TOKEN_LEVEL)
    rep = run_stream(frames(calibrated_config(), 200), AdapterDetector(session), AdapterGenerator(session), pcfg, sink=sink)

for res in shown:
    print(f"\nframe {res.frame_id} at tau={res.tau_used:.3f}: gamma={res.report.gamma:.3f}")
    print(f"  {res.summary.rendered}")
print(f"\n{rep.n_frames} frames, final tau {rep.final_tau:.3f}, mean latency {rep.latency_mean_us / 1000:.1f} ms")
