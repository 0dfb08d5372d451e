"""Strassen-Tile: a tunable-rank, tile-wise bilinear substitute for matmul.

The package provides the operator itself (reference, batched, and fused
evaluation paths), exact Strassen-based triples and initializations, a
FLOP/IO cost model, the 2:4 structured-sparsity baseline, synthetic-tile
training, and a small fake-encoded teacher-student network, all behind a
batch CLI (``strassen-tile``).
"""

from .dense_core import (
    ShapeError,
    SingularSystemError,
    gaussian_matrix,
    least_squares,
    make_rng,
    matmul,
    singular_values,
    spawn_rngs,
    tile_fibers,
    unvec_tile,
    untile_fibers,
    vec_tile,
)
from .snf_operator import (
    SnfTriple,
    decode_tiles,
    encode_tiles,
    extract_slice,
    load_triple,
    save_triple,
    stl_batched,
    stl_fused_step,
    stl_reference,
)
from .strassen_basis import (
    ConstructionError,
    nested_subset_chain,
    pruned_subset_init,
    random_gaussian_init,
    strassen_rank7,
    strassen_rank49,
    subset_triple,
)
from .cost_model import (
    CostReport,
    ProblemShape,
    cost_report,
    count_reference_flops,
    flops_general,
    flops_square,
    io_fused_chain,
    io_square,
    speedup_table,
)
from .pruning24 import (
    Alpha24Result,
    alpha24_order_statistics_oracle,
    estimate_alpha24,
    mask_top2,
    refit_masked,
)
from .training import (
    Class0Config,
    Class0Result,
    DivergenceError,
    build_zw_vectors,
    class0_gradients,
    class0_loss,
    fake_encoding_loss,
    per_w_fake_encoding_regression,
    population_class0_loss,
    solution_matrix,
    train_class0,
)
from .toy_network import (
    SpectrumReport,
    StlLayer,
    ToyNetConfig,
    ToyNetResult,
    load_model,
    save_model,
    spectrum_report,
    stl_layer_forward,
    toy_forward,
    toy_loss_and_grads,
    train_toy_network,
)

__all__ = [name for name in dir() if not name.startswith("_")]
