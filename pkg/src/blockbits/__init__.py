"""Block-wise mixed-precision weight quantization of a toy decoder transformer."""

from .allocator import SearchConfig, classic_greedy, exhaustive_oracle, lattice_probe, relaxed_step, scalable_greedy
from .config import RunConfig, load_config
from .layout import apply_permutations, channel_scores, compute_permutations, partition_weights
from .quantizer import QuantConfig, effective_bits, quantize_model, rtn_quantize_group
from .toymodel import ModelSpec, build_model, coupling_graph, forward_loss, pretrain

__version__ = "0.1.0"
