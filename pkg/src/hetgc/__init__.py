"""Quantized approximate gradient coding for workers that straggle at different rates."""
from .baselines import CodedScheme, SchemeSpec, build_scheme
from .bitalloc import BitAllocation, dp_allocate, greedy_allocate, proposed_allocate
from .design import CodeDesign, optimal_design, two_track_decoder
from .errors import HetGCError
from .losses import LogisticLoss, QuadraticLoss, make_logistic, make_quadratic
from .quantizer import QuantizedMessage, dequantize, pack, quantize, unpack
from .sim import MetricsSeries, TrainConfig, run_experiment
from .stragglers import WorkerProfile, sample_profiles, straggler_prob

__version__ = "0.1.0"

__all__ = [
    "BitAllocation", "CodeDesign", "CodedScheme", "HetGCError", "MetricsSeries", "QuantizedMessage",
    "QuadraticLoss", "SchemeSpec", "TrainConfig", "WorkerProfile", "build_scheme", "dequantize", "dp_allocate",
    "greedy_allocate", "LogisticLoss", "make_logistic", "make_quadratic", "optimal_design", "pack", "proposed_allocate", "quantize", "run_experiment",
    "sample_profiles", "straggler_prob", "two_track_decoder", "unpack",
]
