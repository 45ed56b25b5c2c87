# %% [markdown]
# # Training a small pose transformer
#
# A reduced network and dataset so the cell finishes in about a minute on one
# core. The full ladder (mono, stereo, keypoint one-hot, 6D rotation) is
# produced by `stereopose ablate`.

# %%
import numpy as np

from stereopose.geometry import CameraRig
from stereopose.instruments import make_instrument_set
from stereopose.synth import NoiseConfig, PoseSampler, generate_records
from stereopose.transformer import ModelConfig, TrainHyper, evaluate_mpvpe, train

rig = CameraRig()
models = make_instrument_set(0, 13)
records = generate_records(models, rig, PoseSampler(seed=0), 3000, NoiseConfig())
train_set, test_set = records[:2700], records[2700:]

# %%
config = ModelConfig(layers=2, hidden_dim=64)
result = train(train_set, config, models, TrainHyper(epochs=5), rig=rig)
print("loss per epoch", np.round(result.epoch_loss, 1))

# %%
report, errors = evaluate_mpvpe(result.params, config, test_set, models, rig)
print(f"held-out MPVPE {report.aggregate:.1f} mm (median {np.median(errors):.1f} mm)")
