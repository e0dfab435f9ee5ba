"""Inference-time attention-collapse screening and geometric smoothing."""

from .config import DEFAULT_CONFIG, Phase, TigsConfig
from .diagnostics import MechanismStats, export_rank_heatmap, group_separation, mechanism_stats
from .errors import (
    DomainError,
    EmptyHeadError,
    EmptyRegionError,
    FormatError,
    MaskError,
    ShapeError,
    SupportError,
    TigsError,
)
from .pipeline import DefendedOutput, Instrumentation, ToyModel, apply_phase, bench, tigs_transform, toy_forward
from .screening import ScreeningReport, screen_tensor
from .smoothing import ShrinkPair, anchor_smooth_logits, power_smooth, shrink_factors
from .synth import (
    SynthSpec,
    dispersion_penalty,
    entropy_bound,
    implant_trigger_weights,
    make_attention_suite,
    make_collapsed_row,
    make_distributed_suite,
)
from .tensor_io import AttentionTensor, ContentMask, TensorKind, build_content_mask, load_tensor, save_tensor
from .writeback import kl_divergence, rewritten_mass, write_back

__version__ = "0.1.0"
