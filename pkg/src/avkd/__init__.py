"""Cross-modal knowledge distillation from speech teachers into an
audio-visual student, at a scale that runs on one CPU core."""

__version__ = "0.1.0"
