"""Bridges between real vision models and the retrieval engine's formats.

The engine is reached only through its external interfaces: the SAPEMB01
embedding file, the line-delimited manifest/detections/queries files, and the
ranker wire contract. Nothing here imports the engine.
"""

__version__ = "0.1.0"
