"""Clip sampling, synthetic data, dataset loading and the joint schedule."""
from imcnet.data.augment import AffineParams, augment_clip
from imcnet.data.clips import ClipSample, clip_indices, clips_to_arrays, sample_clip, static_clip
from imcnet.data.datasets import (FileSequence, ImageSet, VideoSet, load_image_dataset,
                                  load_video_dataset, load_video_sequences)
from imcnet.data.schedule import JointSchedule, build_schedule, joint_ratio
from imcnet.data.synthetic import SynthConfig, generate_synthetic, write_davis

__all__ = [
    "AffineParams", "augment_clip", "ClipSample", "clip_indices", "clips_to_arrays", "sample_clip",
    "static_clip", "FileSequence", "ImageSet", "VideoSet", "load_image_dataset", "load_video_dataset",
    "load_video_sequences", "JointSchedule", "build_schedule", "joint_ratio", "SynthConfig",
    "generate_synthetic", "write_davis",
]
