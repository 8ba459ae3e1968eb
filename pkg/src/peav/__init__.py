"""Multi-pair sigmoid contrastive learning and evaluation for audio, video and text embeddings."""

__version__ = "0.1.0"
