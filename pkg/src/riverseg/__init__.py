"""riverseg: desk-scale river segmentation from multispectral imagery.

Pipeline stages: NDWI-based soft label forging, training-chip extraction,
small fully convolutional network training, memory-bounded tiled inference,
evaluation, and river-width measurement.
"""

__version__ = "0.1.0"
