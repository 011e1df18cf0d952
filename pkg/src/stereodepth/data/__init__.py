from .io import (
    DimensionMismatchError,
    FormatError,
    ManifestEntry,
    ManifestError,
    TruncatedError,
    load_entry,
    read_manifest,
    read_pfm,
    read_ppm,
    write_pfm,
    write_ppm,
)
from .synthetic import (
    CameraModel,
    Layer,
    SceneConfig,
    SceneSpec,
    StereoSample,
    generate_dataset,
    generate_scene,
    layer_texture,
    occlusion_mask,
    random_scene_spec,
)
