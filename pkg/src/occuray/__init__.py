"""Occlusion annotation, evaluation and bilayer-decoder reference tools for COCO-style datasets."""

__version__ = "0.1.0"
