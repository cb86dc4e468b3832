"""Speaker-feature adapters for a wav2vec2-style CTC encoder, with the supporting
fMLLR / x-vector estimation, training and scoring pipeline."""

__version__ = "0.1.0"
