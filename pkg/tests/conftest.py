import sys
from pathlib import Path

# allow importing helper modules (e.g. msssim_reference) from this directory
sys.path.insert(0, str(Path(__file__).parent))
