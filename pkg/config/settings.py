import os

from dotenv import load_dotenv

load_dotenv()

# Base directory of the project
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Output locations
DEFAULT_OUT_DIR = os.path.join(BASE_DIR, "runs")
LOG_FILE_NAME = "negfmini.log"
MANIFEST_FILE_NAME = "manifest.json"

# Environment overrides
THREADS_ENV = "NEGFMINI_THREADS"
LOG_LEVEL = os.getenv("NEGFMINI_LOG_LEVEL", "INFO")

# Device file format
DEVICE_MAGIC = "NEGFMINI1"
DEVICE_HEADER_FILE = "header.txt"

# Toy material model (eV, nm)
HOPPING_RANGE = (0.5, 2.0)
ONSITE_RANGE = (-0.1, 0.1)
HOPPING_Z = 0.2
OVERLAP_Z = 0.05
BOND_LENGTH = 0.25
BOND_BUCKLING = 0.2
SPRING_CONSTANT = 1.25e-3
SPRING_TRANSVERSE = 0.3
SPRING_Z = 2.5e-4
EPH_COUPLING = 3.0e-2
N3D = 3

# Numerical broadening and decimation; the leads carry ETA, the device ETA_DEVICE
ETA = 1.0e-6
ETA_DEVICE = 0.0
DECIMATION_TOL = 1.0e-10
DECIMATION_MAX_ITER = 200
CAUSALITY_TOL = 1.0e-10

# Leads
TEMPERATURE = 300.0
BOLTZMANN_EV = 8.617333262e-5
KT = BOLTZMANN_EV * TEMPERATURE
MU_LEFT = 0.0

# Default spectral grid
E_MIN = -0.45
E_MAX = 0.35
OMEGA_STEP = 1

# Self-consistent loop
MIXING = 0.5
SCF_TOL = 1.0e-6
SCF_MAX_ITER = 50
# Currents and current changes below this count as zero
CURRENT_FLOOR = 1.0e-12
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 5

# Emulated half precision
HALF_MAX = 65504.0
HALF_HEADROOM = 1024.0
HALF_TILE = 16

# Flop model
DEFAULT_BNUM = 38
BC_DECIMATION_STEPS = 10
BC_BLOCK_OPS_PER_STEP = 7

# Structure presets from the published runs
SMALL_STRUCTURE = {
    "Na": 4864, "Nb": 34, "Norb": 12, "N3D": 3,
    "NE": 706, "Nomega": 70, "Nkz": 3, "Nqz": 3, "bnum": DEFAULT_BNUM,
}
LARGE_STRUCTURE = {
    "Na": 10240, "Nb": 34, "Norb": 12, "N3D": 3,
    "NE": 1220, "Nomega": 70, "Nkz": 21, "Nqz": 21, "bnum": 40,
}
LARGE_RUN_PROCESSES = 27360
LARGE_RUN_PROCS_PER_NODE = 6
LARGE_RUN_INJECTION_BW = 23.0e9

# Bench protocol
BENCH_REPEATS = 5
