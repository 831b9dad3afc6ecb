"""
Command middleware for the WheelSurrogate CLI
"""
import json
import platform
import sys
import time
import uuid
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional

from config import Config
from utils.exceptions import WheelSurrogateException
from utils.logger import logger

EXIT_DOMAIN_ERROR = 2
EXIT_INTERNAL_ERROR = 1


@dataclass
class RunContext:
    """Bookkeeping of one command invocation"""
    command: str
    run_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    started: float = field(default_factory=time.time)
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    out_dir: Optional[Path] = None
    outputs: Dict[str, Any] = field(default_factory=dict)

    def record(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'run_id': self.run_id,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'versions': library_versions(),
            'wall_time_s': round(time.time() - self.started, 3),
            'outputs': self.outputs,
        }


def library_versions() -> Dict[str, str]:
    import numpy
    import scipy
    import sklearn
    import torch

    return {
        'python': platform.python_version(),
        'numpy': numpy.__version__,
        'scipy': scipy.__version__,
        'scikit-learn': sklearn.__version__,
        'torch': torch.__version__,
    }


def stage_runner(command: str):
    """
    Wrap a CLI command: run id, start/complete logs, run.json and error exits

    The wrapped function receives a `run` keyword with the RunContext and should
    set its seed, config_hash and out_dir.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            run = RunContext(command=command)
            logger.info("Command started", extra={'stage': command, 'run_id': run.run_id})
            try:
                result = func(*args, run=run, **kwargs)
            except WheelSurrogateException as e:
                logger.error(
                    f"{type(e).__name__}: {e.message}",
                    extra={
                        'stage': command,
                        'run_id': run.run_id,
                        'error_code': e.error_code,
                        'details': e.details,
                    }
                )
                sys.stderr.write(json.dumps({**e.to_dict(), 'run_id': run.run_id}, default=str) + '\n')
                sys.exit(EXIT_DOMAIN_ERROR)
            except Exception as e:
                logger.error(
                    f"Unhandled exception: {str(e)}",
                    extra={'stage': command, 'run_id': run.run_id, 'exception_type': type(e).__name__},
                    exc_info=True
                )
                sys.stderr.write(json.dumps({
                    'error': 'INTERNAL_ERROR',
                    'message': str(e),
                    'run_id': run.run_id
                }) + '\n')
                sys.exit(EXIT_INTERNAL_ERROR)

            if run.out_dir is not None:
                out = Path(run.out_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / Config.RUN_FILE_NAME).write_text(
                    json.dumps(run.record(), indent=2, sort_keys=True, default=str) + '\n', encoding='utf-8'
                )
            logger.info(
                "Command completed",
                extra={
                    'stage': command,
                    'run_id': run.run_id,
                    'duration_ms': round((time.time() - run.started) * 1000, 2)
                }
            )
            return result
        return wrapper
    return decorator
