"""
ECCT simulator modules package.

This package contains the following modules:
- nn_core: Dense networks with analytic backpropagation, optimizers and checkpoints
- losses: Cross-entropy, temperature-scaled distillation and the edge/cloud objectives
- datagen: Synthetic and CSV feature-split datasets, IID and Dirichlet partitioning
- transfer: Knowledge packets, capacity-triggered buffers, versioned stores, privatization
- participants: Edge devices and the cloud, and one training round of each
- orchestrator: ECCT, FedAvg, FedGKT-style and local training loops
- evaluation: Accuracy/AUC/MSE, edge- and cloud-based inference, round reports
- run_config: Pydantic run configuration, YAML files and dotted overrides
- run_store: Run directories, JSON-lines logs and text reports
- gradcheck: Finite-difference verification of every analytic gradient
- experiments: Feature-setting, asynchrony and device-scaling comparison suites
"""

from modules.orchestrator import run_ecct, run_fedavg, run_fedgkt, run_local, run_training
from modules.run_config import apply_overrides, build_config, load_config
