# %% [markdown]
# # Optimization fitting
#
# Fits the 7D pose of one instrument to its stereo keypoints with the Adam
# schedule: 500 iterations over 8 restarts for a fresh object, 100 from the
# previous pose afterwards, stopping once the reprojection error drops below
# 4 px. The last cell shows how much accuracy the early stop costs.

# %%
import numpy as np

from stereopose.fitter import FitConfig, fit_pose
from stereopose.geometry import CameraRig
from stereopose.instruments import make_instrument_set
from stereopose.metrics import mpvpe
from stereopose.synth import PoseSampler, make_record

rig = CameraRig()
models = make_instrument_set(0, 13)
rec = make_record(models, rig, PoseSampler(seed=1), None, 0)
model = models[rec.class_id]

# %%
res = fit_pose(None, rec.observation, model, rig, FitConfig())
print(f"{res.iterations} iterations, {res.loss_px:.2f} px, "
      f"MPVPE {mpvpe(res.pose, rec.pose, model):.2f} mm")

# %% [markdown]
# The 4 px stop leaves millimetres of error, mostly along the viewing axis:
# a 64 mm baseline at 0.8 m gives little depth leverage per pixel.

# %%
for stop in (4.0, 1.0, 0.1):
    errs = []
    for i in range(20):
        r = make_record(models, rig, PoseSampler(seed=1), None, i)
        m = models[r.class_id]
        out = fit_pose(None, r.observation, m, rig, FitConfig(early_stop_px=stop, seed=i))
        errs.append(mpvpe(out.pose, r.pose, m))
    print(f"stop at {stop:4.1f} px: median MPVPE {np.median(errs):6.2f} mm")
