# Intensity range
INTENSITY_MIN = 0.0
INTENSITY_MAX = 1.0

# Pyramid
DEFAULT_NUM_LEVELS = 17
DEFAULT_PYRAMID_SCALE = 0.9
MIN_PYRAMID_DIM = 16
PYRAMID_PREFILTER_FACTOR = 0.5

# Energy weights
DEFAULT_LAMBDA = 250.0
DEFAULT_MU = 2.0
DEFAULT_NU_U = 0.08 * DEFAULT_LAMBDA
DEFAULT_NU_SIGMA = 0.08 * DEFAULT_LAMBDA
DEFAULT_V_I = (25.0 / 255.0) ** 2
DEFAULT_N = 2
CHARBONNIER_EPS = 1e-3
INTENSITY_RESIDUAL_WEIGHT = 0.1

# Blur model
DEFAULT_TAU = 0.5
DEFAULT_SIGMA_INIT = 0.8
SIGMA_IDENTITY_THRESHOLD = 0.05
GAUSSIAN_TRUNCATION = 3.0
DEFAULT_SIGMA_MAX = 5.0
RASTER_BAND_ROWS = 32

# Primal-dual / CG
DEFAULT_PD_STEP = 8.0**-0.5
DEFAULT_CG_ITERS = 50
DEFAULT_CG_TOL = 1e-4
CG_DIVERGENCE_WINDOW = 5
POWER_ITERATIONS = 20
NORM_SAFETY_FACTOR = 1.05
DEFAULT_LATENT_ITERS = 10
DEFAULT_FLOW_ITERS = 30
DEFAULT_SIGMA_ITERS = 30
DEFAULT_PD_THETA = 1.0
OBJECTIVE_TOLERANCE = 1e-6

# Linearization
FLOW_FD_STEP = 0.1
SIGMA_FD_STEP = 0.05
FLOW_TRUST_REGION = 1.0
SIGMA_TRUST_REGION = 0.5

# Pipeline
DEFAULT_ALTERNATION_ROUNDS = 3
DEFAULT_BOOTSTRAP_WARPS = 5
DEFAULT_LINE_SEARCH_HALVINGS = 3
ENERGY_TOLERANCE = 1e-4
DATA_MASK_MIN_FRACTION = 0.1

# Occlusion / post-filter
DEFAULT_SIGMA_W = 25.0 / 255.0
OCCLUSION_LOW_WEIGHT = 0.01
DEFAULT_FB_THRESHOLD = 0.5
FILTER_PATCH_RADIUS = 2
FILTER_SEARCH_RADIUS = 1

# Dataset
DATASET_TAU = 0.5
MAX_SUBFRAME_SPEED = 1.0

# Metrics
PSNR_CAP = 100.0
SSIM_WINDOW_RADIUS = 5
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# File formats
FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"
PFM_GRAY_HEADER = b"Pf"
PFM_LITTLE_ENDIAN_SCALE = -1.0
FRAME_PATTERN = "{:05d}.png"
FLOW_FWD_PATTERN = "{:05d}_fwd.flo"
FLOW_BWD_PATTERN = "{:05d}_bwd.flo"
SIGMA_PATTERN = "{:05d}.pfm"

# Environment
ENV_THREADS = "VARDEBLUR_THREADS"

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
