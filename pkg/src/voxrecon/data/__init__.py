"""Voxel and image I/O, synthetic shapes, manifests."""
from .binvox import BinvoxHeader, read_binvox, read_binvox_with_header, write_binvox
from .images import crop_and_rescale, load_image, resize_bilinear, save_image
from .manifest import (Manifest, Record, generate_dataset, load_dataset, load_sample,
                       read_manifest, split_dataset, write_manifest)
from .synth import KINDS, Sample, render_view, synth_generate

__all__ = [
    "BinvoxHeader", "read_binvox", "read_binvox_with_header", "write_binvox",
    "crop_and_rescale", "load_image", "resize_bilinear", "save_image",
    "Manifest", "Record", "generate_dataset", "load_dataset", "load_sample",
    "read_manifest", "split_dataset", "write_manifest",
    "KINDS", "Sample", "render_view", "synth_generate",
]
