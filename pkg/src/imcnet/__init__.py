"""Video object segmentation from multi-frame clips with co-attention and deformable alignment, in numpy."""
__version__ = "0.1.0"
