"""
PSMT — Default hyperparameters and on-disk conventions.
Single source of truth for constants referenced across all modules.

Anything here can be overridden per run through the run-config tree
(see `src.run_config`); modules never hard-code these values.

    from src.config import TAU, IGNORE_MASK_VALUE
"""

# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

# Synthetic shapes set: background + disk / rectangle / triangle
NUM_CLASSES = 4
# In-memory IGNORE is Y (one past the last class); on disk masks use 255
IGNORE_MASK_VALUE = 255

# ---------------------------------------------------------------------------
# Toy backbone (encoder h, decoder g)
# ---------------------------------------------------------------------------

IN_CHANNELS = 3
ENCODER_WIDTHS = (16, 32, 32)   # last width is the feature depth Z
ENCODER_STRIDES = (2, 2, 1)     # product is the downsample factor (4)
MIN_IMAGE_SIDE = 16
BATCH_NORM = False              # BN variant: running stats follow the EMA
INIT_SEED = 0

# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------

EMA_GAMMA = 0.99
EMA_CADENCE = "iter"            # "iter" | "epoch"
GAMMA_RAMP = False              # γ_t = min(γ, 1 − 1/(t+1)) when enabled
AUX_TEACHER = True              # False collapses to single-teacher MT
TAU = 0.8                       # confidence gate

# ---------------------------------------------------------------------------
# Consistency weight ramp-up
# ---------------------------------------------------------------------------

BETA_MAX = 1.0
RAMP_EPOCHS = 5
RAMP_UNIT = "epoch"             # "epoch" | "iter"
CAM_WEIGHT = 1.0

# ---------------------------------------------------------------------------
# Optimiser (SGD + polynomial decay)
# ---------------------------------------------------------------------------

EPOCHS = 40
BATCH_LABELLED = 8
BATCH_UNLABELLED = 8
LR0 = 0.01
POLY_POWER = 0.9
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
CHECKPOINT_EVERY = 5            # epochs

# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

TVAT_MODE = "tvat"              # "tvat" | "vat" | "uniform" | "off"
TVAT_EPSILON = 2.0
TVAT_XI = 0.1
TVAT_POWER_ITERS = 1
TVAT_ON_LABELLED = True

CUTMIX_MODE = "after"           # "after" | "before" | "off"
CUTMIX_AREA = (0.25, 0.5)
CUTMIX_ASPECT = (0.5, 2.0)

ZOOM_SCALES = (0.5, 0.75, 1.25)
INPUT_BRANCH = "random"         # "random" | "cutmix" | "zoom" | "both" | "none"

# Weak (geometric) augmentation
WEAK_FLIP_PROB = 0.5
WEAK_SCALES = (0.5, 0.75, 1.0, 1.25)

# Strong (photometric) augmentation probabilities and magnitudes
STRONG_JITTER_PROB = 0.8
STRONG_JITTER_STRENGTH = 0.4    # brightness / contrast / saturation factor range ±
STRONG_GRAYSCALE_PROB = 0.2
STRONG_BLUR_PROB = 0.5
STRONG_BLUR_SIGMA = (0.1, 1.5)
STRONG_BLUR_KERNEL = 5

# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

SYNTH_HEIGHT = 64
SYNTH_WIDTH = 64
SYNTH_SHAPES = ("disk", "rectangle", "triangle")
SYNTH_SHAPES_PER_IMAGE = (1, 3)
SYNTH_NOISE = 0.05
SYNTH_TRAIN_SIZE = 1024
SYNTH_VAL_SIZE = 256

# ---------------------------------------------------------------------------
# Files and schemas
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = "psmt-ckpt-1"
SPLIT_SCHEMA = "psmt-split-1"
DATASET_DIR = "data/shapes"
RUNS_DIR = "runs"
DEFAULT_CONFIG_PATH = "data/psmt_config.json"
METRICS_FILE = "metrics.jsonl"
GRAD_PROBE_FILE = "grad_probe.json"
SEED = 0
SEED_ENV_VAR = "PSMT_SEED"
