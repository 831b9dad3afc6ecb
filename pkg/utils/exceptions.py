"""
Custom exception classes for WheelSurrogate
"""
from typing import Dict, Any, List


class WheelSurrogateException(Exception):
    """Base exception for WheelSurrogate"""

    def __init__(self, message: str, error_code: str = None, details: Dict[str, Any] = None):
        self.message = message
        self.error_code = error_code or "GENERAL_ERROR"
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self):
        """Convert exception to dictionary"""
        return {
            'error': self.error_code,
            'message': self.message,
            'details': self.details
        }


class ValidationError(WheelSurrogateException):
    """Input validation errors"""

    def __init__(self, message: str, field: str = None, details: Dict[str, Any] = None):
        if field:
            details = details or {}
            details['field'] = field
        super().__init__(message, "VALIDATION_ERROR", details)


class ConfigValidationError(WheelSurrogateException):
    """Run configuration errors, one entry per violated field"""

    def __init__(self, message: str, fields: List[Dict[str, Any]] = None, details: Dict[str, Any] = None):
        details = details or {}
        details['fields'] = fields or []
        super().__init__(message, "CONFIG_VALIDATION_ERROR", details)


class GeometryError(WheelSurrogateException):
    """Wheel generation errors"""

    def __init__(self, message: str, sample_id: int = None, details: Dict[str, Any] = None):
        if sample_id is not None:
            details = details or {}
            details['sample_id'] = sample_id
        super().__init__(message, "GEOMETRY_ERROR", details)


class NoInteriorHoleError(GeometryError):
    """Raster has no spoke opening to place the impact on"""

    def __init__(self, message: str = "No interior hole found; reject this sample", sample_id: int = None):
        super().__init__(message, sample_id)
        self.error_code = "NO_INTERIOR_HOLE"


class DatasetError(WheelSurrogateException):
    """Dataset directory and file I/O errors"""

    def __init__(self, message: str, path: str = None, details: Dict[str, Any] = None):
        if path:
            details = details or {}
            details['path'] = str(path)
        super().__init__(message, "DATASET_ERROR", details)


class SolverError(WheelSurrogateException):
    """FEM solve failures"""

    def __init__(self, message: str, iterations: int = None, residual: float = None, details: Dict[str, Any] = None):
        details = details or {}
        if iterations is not None:
            details['iterations'] = iterations
        if residual is not None:
            details['residual'] = residual
        super().__init__(message, "SOLVER_ERROR", details)


class LabelError(WheelSurrogateException):
    """Label extraction errors"""

    def __init__(self, message: str, sample_id: int = None, details: Dict[str, Any] = None):
        if sample_id is not None:
            details = details or {}
            details['sample_id'] = sample_id
        super().__init__(message, "LABEL_ERROR", details)


class ScalerError(WheelSurrogateException):
    """Min-max scaler errors"""

    def __init__(self, message: str, field: str = None, details: Dict[str, Any] = None):
        if field:
            details = details or {}
            details['field'] = field
        super().__init__(message, "SCALER_ERROR", details)


class ShapeMismatchError(WheelSurrogateException):
    """Layer received a tensor of the wrong shape"""

    def __init__(self, layer: str, expected: Any, actual: Any):
        message = f"Layer '{layer}' expected shape {expected}, got {actual}"
        super().__init__(message, "SHAPE_MISMATCH", {
            'layer': layer,
            'expected': str(expected),
            'actual': str(actual)
        })


class GraphError(WheelSurrogateException):
    """Autograd misuse"""

    def __init__(self, message: str, details: Dict[str, Any] = None):
        super().__init__(message, "GRAPH_ERROR", details)


class TrainingError(WheelSurrogateException):
    """Training divergence and optimizer errors"""

    def __init__(self, message: str, epoch: int = None, parameter: str = None, details: Dict[str, Any] = None):
        details = details or {}
        if epoch is not None:
            details['epoch'] = epoch
        if parameter:
            details['parameter'] = parameter
        super().__init__(message, "TRAINING_ERROR", details)


class CheckpointError(WheelSurrogateException):
    """Checkpoint format or architecture errors"""

    def __init__(self, message: str, path: str = None, details: Dict[str, Any] = None):
        if path:
            details = details or {}
            details['path'] = str(path)
        super().__init__(message, "CHECKPOINT_ERROR", details)


class StageDependencyError(WheelSurrogateException):
    """A pipeline stage ran before its prerequisite"""

    def __init__(self, message: str, prerequisite: str = None, details: Dict[str, Any] = None):
        if prerequisite:
            details = details or {}
            details['prerequisite'] = prerequisite
        super().__init__(message, "STAGE_DEPENDENCY_ERROR", details)


class MetricError(WheelSurrogateException):
    """Metric undefined for the given inputs"""

    def __init__(self, message: str, metric: str = None, details: Dict[str, Any] = None):
        if metric:
            details = details or {}
            details['metric'] = metric
        super().__init__(message, "METRIC_ERROR", details)
