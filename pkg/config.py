"""
Configuration module for WheelSurrogate
"""
import os
import warnings
from dotenv import load_dotenv

warnings.filterwarnings('ignore', category=FutureWarning)

load_dotenv()

class Config(object):
    """Base configuration"""

    # Data locations
    DATA_ROOT = os.getenv('WHEEL_DATA_ROOT', 'data')
    RUN_FILE_NAME = 'run.json'

    # Execution
    SCALE_PRESET = os.getenv('WHEEL_SCALE_PRESET', 'desk')
    WORKERS = int(os.getenv('WHEEL_WORKERS', 1))
    REDUCTION_MODE = os.getenv('WHEEL_REDUCTION_MODE', 'reproducible')  # reproducible | fast
    DEFAULT_SEED = int(os.getenv('WHEEL_SEED', 42))

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE')  # optional rotating JSON log

    # Physical constants shared by every stage
    WHEEL_DIAMETER_MM = 483.0
    GRAVITY_M_S2 = 9.81
    BARRIER_MASS_MIN_KG = 498.0
    BARRIER_MASS_MAX_KG = 558.0
    BARRIER_MASS_STEPS = 1000

    # File format versions
    FORMAT_VERSION = 1
    MANIFEST_SCHEMA_VERSION = 1

class DeskConfig(Config):
    """Laptop-sized runs"""
    SCALE_PRESET = 'desk'

class PaperConfig(Config):
    """Full-resolution runs"""
    SCALE_PRESET = 'paper'

# Configuration dictionary
config = {
    'desk': DeskConfig,
    'paper': PaperConfig,
    'default': DeskConfig
}
