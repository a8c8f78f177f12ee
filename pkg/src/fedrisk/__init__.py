"""Deterministic federated-learning simulator for cross-institution risk models."""

from .compression import CompressionConfig, SparsePayload, compress, decompress, payload_bytes
from .data import GeneratorConfig, SampleRecord, ShardSpec, generate, partition_non_iid, read_csv, write_csv
from .federation import (Federation, FederationConfig, RoundReport, fed_avg, global_loss, local_train,
                         run_training, train_centralized)
from .metrics import compute_accuracy, compute_auc, systemic_detection_score
from .model import ModelConfig, backward, forward, init_params, local_objective
from .numeric import ParamVector, SeededRng
from .privacy import PrivacyConfig, clip_update, epsilon_report, perturb

__version__ = "0.1.0"
