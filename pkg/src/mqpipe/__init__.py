"""Pipelined multi-queue GNN training on a single desk-scale machine.

Layout:

* graph: CSR storage, normalized adjacency, container format, generators
* nn: GCN / mean-aggregation models, losses, optimizers
* samplers: node-wise and layer-wise minibatch samplers with optional
  selection-bias correction
* cache: device-resident feature rows chosen by degree or walk weight
* timing: duration and transfer-cost models
* pipeline: bounded queues, trace schema, discrete-event simulator
* racom: gradient windows, running means, replica sync
* runtime: the multi-device trainer (threaded and deterministic modes)
* autotune: queue sizing from measured stage timings
* bench: end-to-end runs, reports, CSV output
* cli: the mqpipe command
"""

from .graph import (GraphCSR, build_csr, generate_power_law, generate_sbm,
                    laplacian_row, laplacian_triplets, load, load_edge_list,
                    save, split_masks)
from .nn import (ModelState, accuracy, adam_step, batch_loss, forward,
                 full_forward, init_model, loss_and_grads, sgd_step)
from .samplers import (Block, MiniBatch, SamplerParams, SamplingError,
                       build_minibatch, debias_coefficients, debias_estimate,
                       parse_method, sample_fastgcn, sample_ladies,
                       sample_node_wise, weighted_sample_without_replacement)
from .cache import (CacheState, cache_probs_degree, cache_probs_walk,
                    gather_features, lookup, refresh_cache)
from .timing import (DurationModel, NO_DELAY, TransferModel,
                     parse_stage_durations)
from .pipeline import (BoundedQueue, PipelineStopped, PipelineTimeout,
                       SimResult, Trace, TraceEvent, simulate_sequential,
                       simulate_timings, utilization)
from .racom import (Accumulator, AccumulatorError, GradientInbox,
                    GradientPacket, apply_update, compute_sync_period,
                    share_gradient, staleness_cost, sync_models)
from .runtime import (EpochStats, PipelineConfig, batch_rng, plan_epoch,
                      run_epoch, transfer_stage)
from .autotune import (AutotuneError, TimingProfile, auto_queue_size,
                       compute_cap, compute_queue_size, profile,
                       profile_from_trace, steady_slice)
from .bench import (RunReport, TrainResult, TrainSettings, build_report,
                    train, train_repeats, utilization_timeseries)

__version__ = "0.1.0"

__all__ = [
    "GraphCSR", "build_csr", "generate_power_law", "generate_sbm",
    "laplacian_row", "laplacian_triplets", "load", "load_edge_list", "save",
    "split_masks",
    "ModelState", "accuracy", "adam_step", "batch_loss", "forward",
    "full_forward", "init_model", "loss_and_grads", "sgd_step",
    "Block", "MiniBatch", "SamplerParams", "SamplingError",
    "build_minibatch", "debias_coefficients", "debias_estimate",
    "parse_method", "sample_fastgcn", "sample_ladies", "sample_node_wise",
    "weighted_sample_without_replacement",
    "CacheState", "cache_probs_degree", "cache_probs_walk",
    "gather_features", "lookup", "refresh_cache",
    "DurationModel", "NO_DELAY", "TransferModel", "parse_stage_durations",
    "BoundedQueue", "PipelineStopped", "PipelineTimeout", "SimResult",
    "Trace", "TraceEvent", "simulate_sequential", "simulate_timings",
    "utilization",
    "Accumulator", "AccumulatorError", "GradientInbox", "GradientPacket",
    "apply_update", "compute_sync_period", "share_gradient",
    "staleness_cost", "sync_models",
    "EpochStats", "PipelineConfig", "batch_rng", "plan_epoch", "run_epoch",
    "transfer_stage",
    "AutotuneError", "TimingProfile", "auto_queue_size", "compute_cap",
    "compute_queue_size", "profile", "profile_from_trace", "steady_slice",
    "RunReport", "TrainResult", "TrainSettings", "build_report", "train",
    "train_repeats", "utilization_timeseries",
    "__version__",
]
