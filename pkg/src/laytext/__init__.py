"""Layout-interleaved language modeling for OCR document understanding."""

__version__ = "0.1.0"
