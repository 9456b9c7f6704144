"""Motion compensation: deformable alignment cascade, TSC fusion, segmentation head."""
from imcnet.mcm.deform import DeformConv2d, deformable_conv, deformable_conv_backward
from imcnet.mcm.module import MCM, TSC, AlignStage, CascadeAlign, SegmentHead

__all__ = ["MCM", "TSC", "AlignStage", "CascadeAlign", "SegmentHead", "DeformConv2d",
           "deformable_conv", "deformable_conv_backward"]
