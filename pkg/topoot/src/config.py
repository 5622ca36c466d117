"""
Configuration settings for the TopoOT segmentation pipeline.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file if present
load_dotenv()

# Runtime
LOG_LEVEL = os.getenv("TOPOOT_LOG_LEVEL", "INFO").upper()
DEFAULT_JOBS = int(os.getenv("TOPOOT_JOBS", os.cpu_count() or 1))

# Filtration
DEFAULT_THRESHOLDS = int(os.getenv("TOPOOT_THRESHOLDS", 10))
DEFAULT_THRESHOLD_MODE = os.getenv("TOPOOT_THRESHOLD_MODE", "uniform")  # uniform | quantile

# Optimal transport
DEFAULT_EPSILON = 0.05  # entropic regularization
DEFAULT_MAX_ITER = 200  # Sinkhorn iterations
DEFAULT_TOL = 1e-9  # L1 marginal violation

# Chaining
DEFAULT_ALPHA = 0.5
DEFAULT_TOP_K = 1
DEFAULT_TOP_M = 8
DEFAULT_DELTA_SUB = 0.2
DEFAULT_DELTA_SUP = 0.2
DEFAULT_AGGREGATE = "sum"  # sum | mean
DEFAULT_MAX_POINTS = None  # optional cap on per-threshold diagram size before matching

# Test-time training
DEFAULT_LAMBDA = 0.5
DEFAULT_MARGIN = 0.4
DEFAULT_EPOCHS = 5
DEFAULT_STEPS_PER_EPOCH = 200
DEFAULT_LR = 1e-3
DEFAULT_PAIRS = 256
DEFAULT_HIDDEN = (32, 16)  # widths of the two hidden layers; the second is the embedding
DEFAULT_LOSS = "both"  # both | ot | contrastive
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Evaluation
DEFAULT_THR_C = 3.0  # mu + c * sigma baseline

# Seeding
DEFAULT_SEED = int(os.getenv("TOPOOT_SEED", 0))
