from .manifest import (
    DEFAULT_MODELED_AUS,
    AUFrameRecord,
    DatasetManifest,
    load_manifest,
    make_record,
    save_manifest,
)
from .prep import (
    category_counts,
    class_weights_from_rates,
    compute_class_weights,
    merge_hybrid,
    split_frames,
    split_subject_disjoint,
    undersample,
)
from .synth import SynthConfig, synth_generate
from .images import load_image, load_images
