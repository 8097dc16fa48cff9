"""Streaming garment-conditioned video diffusion at desk scale.

A numpy implementation of a chunk-autoregressive latent video generator:
flow-matching teacher, teacher-forcing and reweighted distribution-matching
distillation into a causal student, and a KV cache with an attention sink,
FIFO eviction and garment-switch rescheduling.
"""
from .autodiff import Tape, Tensor, finite_diff_check, no_grad
from .backbone import Backbone, BackboneConfig, ConditionSet
from .codec import LatentCodec, LatentSequence, PixelVideo
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DataConfig, World, generate_dataset
from .distill import DmdState, GaussianOracle, RewardAdapter, dmd_step, gaussian_dmd_run, reweight, teacher_forcing_step, train_fake_score
from .flow import NoisePlan, StepSchedule, cfm_loss, forward_noise, sample_fewstep, sample_multistep
from .kvcache import KvCache, garment_refresh, historical_withdraw, reference_disentangle
from .masking import build_inference_mask, build_tf_mask
from .pipeline import run_pipeline
from .session import Session, SwitchCommand, enqueue_switch, start, step

__version__ = "0.1.0"
