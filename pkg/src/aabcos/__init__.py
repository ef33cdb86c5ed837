"""Anti-aliased B-cos networks with exact contribution maps and pointing-game evaluation."""
from .explain import ContributionMap, contribution_map, contribution_maps_all
from .layers import BcosModel, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .pooling import PoolKind, PoolVariant, blurpool, flcpool, highfreq_energy, strided_reduce
from .tensor import Tensor

__version__ = "0.1.0"
