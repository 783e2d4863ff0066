"""Dataset containers, splits, augmentation and synthetic glyphs."""
from .augment import AugmentParams, apply_augment, augment_batch, draw_augment_params, shift_image, standard_augment
from .container import (MAGIC, decode_container, encode_container, load_container, load_image, pack_dataset,
                        read_image_folders, save_container)
from .dataset import CASE_TAGS, DOMAINS, DatasetError, LabeledImageSet, to_nchw, to_nhwc
from .glyphs import glyph_prototype, make_glyph_dataset, render_glyph
from .splits import (PROFILES, SplitSpec, apply_case_split, emnist_profile, omniglot_profile, split_cases,
                     split_domains, vggface_profile)

__all__ = [
    "AugmentParams", "CASE_TAGS", "DOMAINS", "DatasetError", "LabeledImageSet", "MAGIC", "PROFILES", "SplitSpec",
    "apply_augment", "apply_case_split", "augment_batch", "decode_container", "draw_augment_params",
    "emnist_profile", "encode_container", "glyph_prototype", "load_container", "load_image",
    "make_glyph_dataset", "omniglot_profile", "pack_dataset", "read_image_folders", "render_glyph",
    "save_container", "shift_image", "split_cases", "split_domains", "standard_augment", "to_nchw", "to_nhwc",
    "vggface_profile",
]
