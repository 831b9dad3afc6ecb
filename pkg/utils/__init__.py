"""
Utility modules for WheelSurrogate
"""
from .logger import logger, setup_logger
from .exceptions import (
    WheelSurrogateException,
    ValidationError,
    ConfigValidationError,
    GeometryError,
    NoInteriorHoleError,
    DatasetError,
    SolverError,
    LabelError,
    ScalerError,
    ShapeMismatchError,
    GraphError,
    TrainingError,
    CheckpointError,
    StageDependencyError,
    MetricError
)

__all__ = [
    'logger',
    'setup_logger',
    'WheelSurrogateException',
    'ValidationError',
    'ConfigValidationError',
    'GeometryError',
    'NoInteriorHoleError',
    'DatasetError',
    'SolverError',
    'LabelError',
    'ScalerError',
    'ShapeMismatchError',
    'GraphError',
    'TrainingError',
    'CheckpointError',
    'StageDependencyError',
    'MetricError'
]
