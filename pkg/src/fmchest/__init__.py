"""Flow-matching MIMO channel estimation with a score-matching baseline."""

from .bench import BenchReport, ExperimentSpec, aggregate_nmse, emit_csv, nmse_db, read_csv, run_sweep
from .channel import (
    ChannelDataset,
    ChannelModelConfig,
    build_dataset,
    generate_channel,
    load_dataset,
    save_dataset,
    steering_vector,
)
from .errors import (
    ConfigError,
    DimensionError,
    FmchestError,
    FormatError,
    InvalidParameterError,
    InvalidPilotError,
    ModelStateError,
    SamplerDivergenceError,
    TrainingError,
)
from .flow import FlowPathConfig, TrainConfig, cfm_loss, corrupt, flow_point, target_velocity, train
from .nn import AdamW, NetworkConfig, VelocityNet, load_checkpoint, save_checkpoint
from .pilots import Measurement, PilotConfig, ls_estimate, make_pilots, measure, snr_to_sigma
from .sampler import SamplerConfig, estimate_channel, euler_estimate
from .score import LangevinConfig, ScoreModel, annealed_langevin, dsm_loss, dsm_train
from .training import OptimizerConfig, TrainResult

__version__ = "0.1.0"
