"""A perfect detector that is merely late.

The detector below returns the exact ground truth of whatever frame it was
given. Offline it scores AP 1.0. Once the world keeps moving while it computes,
its answers describe the past and streaming AP falls as latency grows.
"""

from streamperc.metrics import offline_ap, streaming_ap
from streamperc.scene import RandomSpawn, SceneConfig, generate_stream
from streamperc.stream_sim import LatencyModel, OracleDetector, pair_for_sap, simulate

scene = generate_stream(SceneConfig(frame_count=90, rng_seed=7,
                                    spawn=RandomSpawn(n_objects=6, speed_range=(1.0, 6.0))))
print(f"{len(scene.frames)} frames at {scene.fps:g} fps, "
      f"{sum(len(f.gt) for f in scene.frames)} boxes")
print(f"offline AP: {offline_ap(scene, OracleDetector()).ap:.4f}\n")

print("latency  frames processed  streaming AP")
for ms in (1, 25, 34, 50, 75, 100, 150):
    trace = simulate(scene, OracleDetector(), LatencyModel.constant(ms / 1000))
    print(f"{ms:5d} ms  {len(trace.records):16d}  {streaming_ap(trace, scene).ap:12.4f}")

# Anything up to one frame interval (33.3 ms here) behaves identically: each
# frame is judged against the output computed from the frame before it.
trace = simulate(scene, OracleDetector(), LatencyModel.constant(0.025))
pairs = pair_for_sap(trace, scene)
print("\nfirst pairings at 25 ms (frame <- output of frame):")
for p in pairs[:5]:
    src = "EMPTY" if p.record is None else p.record.input_frame_index
    print(f"  {p.frame_index} <- {src}")
