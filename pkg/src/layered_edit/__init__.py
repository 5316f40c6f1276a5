"""Layered, conflict-aware editing over a small seeded attention denoiser."""

from .attention import AttentionWeights, Substrate, TokenSet, attention_update, cross_attention_map, \
    removed_self_attention, toy_denoise
from .decomposition import ConflictReport, RemovalSchedule, a_iou, aggregate_attention, conflict_mask, \
    decompose, region_remove, removal_rate
from .fusion import TransparencyField, fuse, init_transparency, optimize_transparency, overlap_mask, \
    transparency_grad, transparency_grads, transparency_loss
from .geometry import GeometricOp, centroid, move_map, resize_map
from .grid import DegenerateObjectError, ParameterError, SeededRng, StateError, bernoulli_mask, \
    bilinear_resize, masked_reduce
from .gridio import read_grid, read_mask, write_grid, write_mask, write_pgm
from .layers import EditScenario, LayerSpec, LayerStack, ObjectSpec, PanopticRegion, PipelineOutput, \
    build_layer_prompts, containment, denoise_all_layers, run_pipeline
from .scenario import ScenarioError, load_scenario, save_scenario
from .schedule import LatentState, NoiseSchedule, cfg_combine, ddim_invert, ddim_step, forward_noise, snr

__version__ = "0.1.0"
