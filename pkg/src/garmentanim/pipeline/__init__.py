"""Synthetic triplet construction with pluggable external-model clients."""
from .clients import (ClientError, FunctionClient, HttpClient, ModelClient, ModelClientSuite,
                      StubBackend, StubClient, load_suite)
from .geometry import BBox, CropSpec, MaskImage, adaptive_crop
from .manifest import (VideoEntry, build_dataset, load_triplets, load_video_entry, read_manifest,
                       read_video_list, write_manifest)
from .stages import (MODES, PipelineConfig, StageError, TripletResult, build_inpaint_mask,
                     build_triplet, compose_inpaint_prompt, extract_garment_image,
                     select_garment_frame, select_human_frame, synthesize_alt_human)
