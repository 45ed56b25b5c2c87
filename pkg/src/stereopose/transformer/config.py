from __future__ import annotations

from dataclasses import asdict, dataclass

from ..geometry import NUM_KEYPOINTS

MODALITIES = ("mono", "stereo")
ROTATION_MODES = ("axis_angle3", "sixd")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 5
    hidden_dim: int = 128
    heads: int = 4
    modality: str = "stereo"
    keypoint_onehot: bool = True
    rotation_mode: str = "sixd"
    class_count: int = 13
    keypoint_count: int = NUM_KEYPOINTS
    w_pose: float = 1.0
    w_vertex: float = 1.0
    w_kp3d: float = 1.0
    ffn_mult: int = 4
    # network outputs are in meters; the heads scale them to millimeters
    output_scale_mm: float = 1000.0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be at least 1")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.rotation_mode not in ROTATION_MODES:
            raise ValueError(f"rotation_mode must be one of {ROTATION_MODES}")
        if self.keypoint_count != NUM_KEYPOINTS:
            raise ValueError(f"keypoint_count is fixed at {NUM_KEYPOINTS}")

    @property
    def feature_dim(self) -> int:
        """Token width: 4 coordinates, visibility, keypoint index, class, pose flag."""
        return 5 + (self.keypoint_count if self.keypoint_onehot else 0) + self.class_count + 1

    @property
    def rotation_dim(self) -> int:
        return 6 if self.rotation_mode == "sixd" else 3

    @property
    def pose_dim(self) -> int:
        return 3 + self.rotation_dim + 1

    @property
    def tokens(self) -> int:
        return self.keypoint_count + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> ModelConfig:
        return cls(**d)


# ablation ladder, in order of increasing input/output richness
ABLATION_CONFIGS = {
    "mono": dict(modality="mono", keypoint_onehot=False, rotation_mode="axis_angle3"),
    "stereo": dict(modality="stereo", keypoint_onehot=False, rotation_mode="axis_angle3"),
    "stereo+kp_onehot": dict(modality="stereo", keypoint_onehot=True, rotation_mode="axis_angle3"),
    "stereo+kp_onehot+6d": dict(modality="stereo", keypoint_onehot=True, rotation_mode="sixd"),
}
