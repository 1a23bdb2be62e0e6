from .augment import AugmentationPolicy, augment
from .manifest import ClassRecord, DatasetManifest, ImageRecord, load_image, load_mask, save_image, save_mask
from .mvtec import import_mvtec
from .toy import ToyClassSpec, ToySpec, generate_toy_dataset
from .variants import (
    MisalignmentParams,
    build_aligned_dataset,
    build_misaligned_dataset,
    sample_inward_perturbation,
    sample_misalignment,
)
