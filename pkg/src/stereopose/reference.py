"""Published reference numbers, shown next to measured results in reports.

These are fixtures only: they come from real-data experiments (detector
trained on real images, other instruments, other datasets) and are never
compared against or asserted on.
"""

ABLATION_MPVPE_MM = {
    "mono": 64.0,
    "stereo": 28.9,
    "stereo+kp_onehot": 23.0,
    "stereo+kp_onehot+6d": 11.8,
}

# (object classes in sequence, method) -> (error mm, frames per second)
FIT_COMPARISON = {
    (1, "transformer"): (16.9, 209.0),
    (1, "optimization"): (13.8, 1.0),
    (13, "transformer"): (11.8, 202.0),
    (13, "optimization"): (21.6, 1.0),
}

# mean ADD (mm) on a monocular surgical drill dataset, five-fold cross-validation
DRILL_ADD_MM = {
    "HandObjectNet": 13.8,
    "PVNet": 39.7,
    "HMD-EgoPose": 17.2,
    "reference method (ground-truth keypoints)": 11.4,
    "reference method (detected keypoints)": 44.3,
}

# average ADD-S accuracy (%) on a public stereo object benchmark
STEREO_BENCHMARK_ADDS_ACC = {
    "PVNet": 42.48,
    "KeyPose": 39.42,
    "reference method": 36.46,
}
