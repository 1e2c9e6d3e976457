"""In-vivo vessel segmentation and capillary morphometry toolkit.

Pipeline stages, each usable as a library module or via the ``vesselseg``
CLI: slice-wise motion correction (motion), intensity normalization and
resampling (volume), a from-scratch patch-based 3D convolutional classifier
(net), whole-volume inference with post-processing (segment), centerline and
graph extraction (centerline), per-segment measurements with group statistics
(morphometry), overlap/distance scoring (metrics), and a seeded synthetic
phantom generator for end-to-end validation (phantom).
"""

__version__ = "0.1.0"
