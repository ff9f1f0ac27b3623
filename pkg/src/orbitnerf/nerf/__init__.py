from .grid import (HashGridConfig, level_resolutions, hash_index,
                   init_hash_tables, encode, encode_backward)
from .field import (MlpParams, init_mlp, field_eval, elu_plus_one,
                    volume_render, composite, composite_backward)
from .training import (TrainConfig, RadianceField, TrainResult, train,
                       render_novel_view, save_checkpoint, load_checkpoint,
                       TrainingDivergedError, rays_for_rig)

__all__ = [
    "HashGridConfig", "level_resolutions", "hash_index", "init_hash_tables",
    "encode", "encode_backward", "MlpParams", "init_mlp", "field_eval",
    "elu_plus_one", "volume_render", "composite", "composite_backward",
    "TrainConfig", "RadianceField", "TrainResult", "train",
    "render_novel_view", "save_checkpoint", "load_checkpoint",
    "TrainingDivergedError", "rays_for_rig",
]
