"""Dataset ingestion, degradation, teacher stores, checkpoints and the synthetic fixture."""

from .formats import (
    Checkpoint,
    TeacherStore,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    decode_teacher_store,
    encode_checkpoint,
    encode_teacher_store,
    read_teacher_store,
    write_teacher_store,
)
from .images import decode_pgm, degrade, encode_pgm, load_image, quantize, write_pgm
from .manifest import ImageSet, Manifest, ManifestError, Record, load_images, load_manifest, save_manifest
from .synth import generate, split_per_class, synth_generate

__all__ = [
    "Checkpoint",
    "ImageSet",
    "Manifest",
    "ManifestError",
    "Record",
    "TeacherStore",
    "checkpoint_load",
    "checkpoint_save",
    "decode_checkpoint",
    "decode_pgm",
    "decode_teacher_store",
    "degrade",
    "encode_checkpoint",
    "encode_pgm",
    "encode_teacher_store",
    "generate",
    "load_image",
    "load_images",
    "load_manifest",
    "quantize",
    "read_teacher_store",
    "save_manifest",
    "split_per_class",
    "synth_generate",
    "write_pgm",
    "write_teacher_store",
]
