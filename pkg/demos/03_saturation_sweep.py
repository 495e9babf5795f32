# %% [markdown]
# # Finding the link's knee
#
# A constant-rate probe stream steps up by 100 kbit/s every dwell period
# through a live loopback proxy. The knee is the first rate whose median
# one-way latency passes 100 ms. Short dwell here to keep it quick; the
# acceptance run uses 10 s per step.

# %%
from segjpeg import saturation_sweep

rep = saturation_sweep("poor_4g", rate_step_kbit=100, dwell_s=3.0, start_kbit=300)
for s in rep.steps:
    med = "inf" if s.effective_median_ms == float("inf") else f"{s.effective_median_ms:.0f}"
    print(f"{s.rate_kbit:6.0f} kbit/s  {s.received:5d}/{s.sent:<5d}  median {med} ms")
print("knee:", rep.saturation_kbit, "kbit/s  stopped by", rep.stopped_by)
