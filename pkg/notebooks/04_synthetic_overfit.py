"""
Overfitting a small synthetic set
=================================

Eight 64x64 images with bright ellipses. The acceptance run uses 200
epochs (about six minutes on one core); EPOCHS below is smaller so the
script finishes quickly.
"""

# %%
import tempfile
from pathlib import Path

from polypnet import data_io
from polypnet.train_eval import TrainConfig, evaluate, smoothed, train

EPOCHS = 40
work = Path(tempfile.mkdtemp())
manifest = data_io.gen_synthetic(8, 64, seed=1, out_dir=work)

# %%
cfg = TrainConfig(epochs=EPOCHS, batch_size=2, lr=1e-4, seed=1, input_size=64)
result = train(cfg, manifest)
print([round(v, 4) for v in smoothed(result.losses, 10)])

# %%
scores = evaluate(result.params, manifest, 0.5, size=64, report_path=work / "report.csv")
print(scores.mean)
print((work / "report.csv").read_text())
