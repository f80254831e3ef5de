from .hashgrid import (
    EncodeCache,
    HashGridConfig,
    HashGridState,
    encode,
    encode_backward,
    level_index,
)
from .mlp import MlpCache, MlpConfigError, MlpWeights, mlp_backward, mlp_forward
from .obstruction import (
    FieldCache,
    FieldGrads,
    ObstructionField,
    lim_gates,
    obstruction_color,
    obstruction_color_backward,
)

__all__ = [
    "EncodeCache", "HashGridConfig", "HashGridState", "encode", "encode_backward",
    "level_index", "MlpCache", "MlpConfigError", "MlpWeights", "mlp_backward",
    "mlp_forward", "FieldCache", "FieldGrads", "ObstructionField", "lim_gates",
    "obstruction_color", "obstruction_color_backward",
]
