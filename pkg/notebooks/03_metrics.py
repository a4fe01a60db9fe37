"""
Segmentation scores
===================
"""

# %%
import numpy as np

from polypnet.metrics import ConfusionCounts, aggregate_counts, aggregate_dataset, compute_metrics, confusion_counts

# %%
pred = np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
gt = np.array([[1, 0], [1, 0]]).reshape(1, 1, 2, 2)
c = confusion_counts(pred, gt)
print(c, compute_metrics(c))

# %%
# DSC is a monotone function of IoU: dsc = 2 iou / (1 + iou).
m = compute_metrics(ConfusionCounts(30, 7, 11, 200))
print(m.dsc, 2 * m.miou / (1 + m.miou))

# %%
# Macro (per image) vs micro (pooled pixels) averaging.
counts = [ConfusionCounts(1, 0, 0, 3), ConfusionCounts(0, 1, 1, 2)]
print("macro", aggregate_dataset([compute_metrics(k) for k in counts]).miou)
print("micro", aggregate_counts(counts).miou)

# %%
# Nothing predicted, nothing there: a perfect score rather than 0/0.
print(compute_metrics(ConfusionCounts(0, 0, 0, 64)))
