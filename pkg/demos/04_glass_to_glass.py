# %% [markdown]
# # Glass-to-glass latency
#
# Capture, simulated detector delay, encode, paced send, emulated link,
# reassembly and decode, all timed on one monotonic clock.

# %%
from segjpeg import InferenceDelay, MaskSourceConfig
from segjpeg.bench import CodecConfig, run_g2g
from segjpeg.sources import YOLO_X_DELAY

source = MaskSourceConfig(inference_delay=InferenceDelay(*YOLO_X_DELAY))
rep = run_g2g(source, profile="medium_4g", duration_s=20.0, seed=0)
print(rep.summary())

# %% [markdown]
# Without the link and the pacer, what is left is local processing.

# %%
local = run_g2g(profile=None, codec=CodecConfig(pace=False), duration_s=5.0)
print(f"loopback, unpaced: median {local.median_ms:.1f} ms over {local.count} frames")
