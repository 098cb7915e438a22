"""Raw-waveform convolutional sound networks trained by teacher-student distillation."""

__version__ = "0.1.0"
