"""Hierarchical part-controllable 2-D object sprite generation.

Three chained stages: a graph-convolutional conditional VAE over part
bounding-box layouts, a recurrent conditional VAE over per-part masks
composed into one-hot label maps, and an adversarially trained label-map to
RGB translator. Includes training, Frechet-distance evaluation, a CLI and an
HTTP editing service.
"""

__version__ = "0.1.0"
