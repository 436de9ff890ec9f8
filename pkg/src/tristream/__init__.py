"""Triplet-stream attention-fusion classification toolkit.

A desk-scale system that classifies grayscale scans with four cooperating
branches: a global image branch, a heat-map branch cropped around the most
activated region of the global features, an infected branch fed left/right
lesion crops from a semi-supervised segmenter, and a fusion head over the
concatenated pooled features. Includes the staged training protocol,
metrics/AUC, exact t-SNE embedding, and a CLI covering data synthesis,
pseudo-labeling, training, evaluation, and visualization.
"""

__version__ = "0.1.0"
