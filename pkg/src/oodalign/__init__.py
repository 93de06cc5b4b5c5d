"""Post-hoc OOD detection for 3D object-detector features.

Object features are aligned to a frozen text-embedding space with a small
trainable head; at inference, objects are scored by norm-scaled similarity
against a bank of per-class text embeddings and thresholded into ID / OOD.
"""

__version__ = "0.1.0"
