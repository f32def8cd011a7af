"""Source-free adaptation of a toy open-vocabulary segmenter."""

__version__ = "0.1.0"
