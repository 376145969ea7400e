"""
Multi-channel birdsong identification from spectrogram images with frozen
feature extractors and small trainable classifier heads.
"""
__version__ = "0.1.0"
