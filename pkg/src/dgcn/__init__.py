"""Distributed training of graph convolutional networks over agent networks."""

from .graphs import DataGraph, Partition, PruneResult, normalize_shift, \
    partition_bfs, prune_to_comm
from .topology import (AdmmState, MixingMatrix, deflated_spectral_radius,
                       design_mixing_admm, fully_connected_mixing,
                       metropolis_weights, project_feasible, soft_threshold)
from .gcn import (CentralConfig, LayerSpec, ParamBank, TrainingDiverged,
                  block_backward, block_forward, gc_backward, gc_forward,
                  load_checkpoint, masked_loss, masked_loss_grad,
                  save_checkpoint, train_centralized)
from .distributed import (AgentState, DistConfig, DistributedGCN, MessageBatch,
                          OptimizerSpec, ScheduleSpec, consensus_step,
                          dist_backward, dist_forward, local_step, step_size,
                          train_distributed)
from .metrics import (TrainRecord, accuracy, consensus_residual,
                      max_pairwise_distance, stationarity, summarize)
from .datasets import (SbmSpec, SensorGridSpec, dataset_summary,
                       generate_synthetic, kernel_adjacency, load_dataset,
                       save_dataset)
from .harness import ExperimentConfig, report, run_experiment, sweep_topologies

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
