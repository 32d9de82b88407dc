from daquant.sim.model import LRSchedule, ModelState
from daquant.sim.simulator import (
    CSV_COLUMNS,
    Codec,
    ExperimentConfig,
    MetricsRecord,
    RunResult,
    Sampling,
    Scheme,
    Simulation,
    baseline_m,
    convex_step_size,
    daqu_bits_bound,
    default_m,
    deviation_bound,
    gradq_bits_bound,
    meter_report,
    records_to_csv,
    run_experiment,
)
from daquant.sim.wire import MsgType, WireMessage, decode_frames, encode_frames

__all__ = [
    "CSV_COLUMNS", "Codec", "ExperimentConfig", "LRSchedule", "MetricsRecord", "ModelState",
    "MsgType", "RunResult", "Sampling", "Scheme", "Simulation", "WireMessage", "baseline_m",
    "convex_step_size", "daqu_bits_bound", "decode_frames", "default_m", "deviation_bound", "encode_frames", "gradq_bits_bound",
    "meter_report", "records_to_csv", "run_experiment",
]
