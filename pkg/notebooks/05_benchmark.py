"""
Throughput
==========

Batch-1 forward passes; only the model is timed.
"""

# %%
from polypnet import build_model
from polypnet.bench import run_benchmark

# %%
report = run_benchmark(build_model(input_size=128), input_size=128, iters=5, warmup=1, workers=1)
print(report.text())

# %%
# fps is iterations over the summed latencies.
print(report.fps_mean, report.iterations / sum(report.latencies))
