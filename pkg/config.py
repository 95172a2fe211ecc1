"""Configuration settings for the ECCT edge-cloud simulator."""
import os

from dotenv import load_dotenv

# Centralize environment loading
# config.py is imported from the repository root (by main_ecct_CLI.py and the modules package)
ENV_PATH = os.path.join(os.path.dirname(__file__), 'modules', '.env')
load_dotenv(dotenv_path=ENV_PATH)  # local dev: picks up ECCT_* overrides from modules/.env if present

# Runtime environment
RUNS_DIR = os.getenv("ECCT_RUNS_DIR", "runs")
LOG_LEVEL = os.getenv("ECCT_LOG_LEVEL", "INFO")
WORKERS = int(os.getenv("ECCT_WORKERS", "1"))    # >1 trains the selected devices of a round on a thread pool

# Topology and schedule (desk-scale defaults)
NUM_DEVICES = 20
ROUNDS = 100
DEVICE_EPOCHS = 1
CLOUD_EPOCHS = 3    # cloud has more compute, so E_s > E_d
BATCH_SIZE = 32
SELECT_RATIO = 1.0
SEED = 0

# Embeddings exchanged between edge and cloud
EMBEDDING_DIM = 16

# Network widths (hidden layers only; output sizes follow from the task)
EDGE_ENCODER_WIDTHS = [32]
EDGE_CLASSIFIER_WIDTHS = [32]
CLOUD_ENCODER_WIDTHS = [64, 64]
CLOUD_CLASSIFIER_WIDTHS = [64]
HETERO_WIDTH_CHOICES = [8, 16, 32]

# Optimizer
OPTIMIZER = "adam"
LEARNING_RATE = 1e-3
MOMENTUM = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Losses
ALPHA_S = 1.0
ALPHA_D = 1.0
KD_TEMPERATURE = 2.0
TWO_STAGE_SWITCH_ROUND = 50     # alphas are 0 before this round, then ALPHA_S / ALPHA_D
FILTERED_KD = True

# Knowledge transfer
BUFFER_CAPACITY = 64    # samples accumulated before a buffer flushes
ASYNC_COMM_PERIODS = [1, 2, 3]

# Data
NUM_CLASSES = 10
NUM_SAMPLES = 20000
FED_DIM = 8
CEN_DIM = 24
CLASS_SEPARATION = 3.0
DIRICHLET_ALPHA = 0.5
TEST_RATIO = 0.2
DIRICHLET_MAX_RETRIES = 100

# Variance floor used when standardizing columns
VARIANCE_FLOOR = 1e-12
