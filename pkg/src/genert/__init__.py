"""Neural ray tracing: a classical SBR tracer whose reflection model is a trainable network."""

from .errors import GenertError
from .geometry import RxConfig, TxConfig, intersect_batch, intersect_nearest, launch_rays
from .metrics import MetricsReport, avg_delay, evaluate_cirs, overall_error, rcm_error
from .physics import Cir, FresnelOracle, Mpc, fresnel_coefficients, polarization_angle, read_cir_dir, write_cir
from .predictor import (NeuralInteractionModel, Network, PredictorConfig, build_network, load_checkpoint,
                        predict, save_checkpoint)
from .scene import Environment, Humidity, load_environment, material_for, validate_environment
from .tracer import TraceLimits, trace_multi, trace_paths
from .training import (E2ESchedule, PretrainSchedule, build_e2e_dataset, build_polarized_datasets,
                       match_paths, pretrain, train_end_to_end)

__version__ = "0.1.0"
