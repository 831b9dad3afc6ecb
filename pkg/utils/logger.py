"""
Structured logging module for WheelSurrogate
"""
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from pythonjsonlogger.json import JsonFormatter

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'

# Fields every pipeline record may carry through `extra=`
CONTEXT_FIELDS = ('stage', 'sample_id', 'run_id', 'epoch')


class StageJSONFormatter(JsonFormatter):
    """JSON formatter that always emits the pipeline context fields"""

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        log_record['level'] = record.levelname
        log_record['logger'] = record.name
        for field in CONTEXT_FIELDS:
            if field not in log_record:
                log_record[field] = getattr(record, field, None)
        log_record.pop('levelname', None)
        log_record.pop('name', None)


def setup_logger(name: str = 'wheelsurrogate', log_level: str = 'INFO', log_file: Optional[str] = None):
    """
    Setup structured logger

    Args:
        name: Logger name
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path to a rotating JSON log file
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level.upper()))
    logger.propagate = False

    # Remove existing handlers
    logger.handlers = []

    # Line-delimited JSON on stderr
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, log_level.upper()))
    console_handler.setFormatter(StageJSONFormatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(StageJSONFormatter(LOG_FORMAT))
        logger.addHandler(file_handler)

        # Error file handler (errors only)
        error_log_file = str(log_path.with_name(log_path.stem + '_errors' + log_path.suffix))
        error_handler = RotatingFileHandler(
            error_log_file,
            maxBytes=10 * 1024 * 1024,
            backupCount=10
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(StageJSONFormatter(LOG_FORMAT))
        logger.addHandler(error_handler)

    return logger

# Create default logger
logger = setup_logger()
