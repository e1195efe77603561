"""Audio-adaptive domain adaptation for activity recognition on synthetic
audiovisual features: pseudo-absent labeling, audio-balanced learning,
audio-based attention, and an audio-infused transformer recognizer."""

__version__ = "0.1.0"

from .synth import DomainSpec, Dataset, VideoSample, generate, mix_audio
from .losses import LossConfig
from .pipeline import ExperimentConfig, default_config, default_spec, run_experiment

__all__ = [
    "DomainSpec", "Dataset", "VideoSample", "generate", "mix_audio",
    "LossConfig", "ExperimentConfig", "default_config", "default_spec",
    "run_experiment", "__version__",
]
