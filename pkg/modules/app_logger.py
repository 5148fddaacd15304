"""
Run logging shared by the trainer, the probes and the command-line front end.

`AppLogger` keeps the small surface the workflows use (`log`, `warn`, `error`,
`log_code`) and writes `YYYY-MM-DD HH:MM:SS - LEVEL - message` lines through the
`logging` package. Without an explicit handler it logs to stderr so that stdout
stays free for command results.
"""

import json
import logging
import sys

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class AppLogger:
    def __init__(self, name: str = "mtlse", handler: logging.Handler | None = None, level: int = logging.INFO):
        self._logger = logging.getLogger(name)
        self._logger.setLevel(level)
        self._logger.propagate = False
        if handler is None and not self._logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
        if handler is not None:
            handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
            self._logger.addHandler(handler)

    def log(self, message):
        self._logger.info(str(message))

    def warn(self, message):
        self._logger.warning(str(message))

    def error(self, message):
        self._logger.error(str(message))

    def log_code(self, data):
        """Logs a dict (or JSON string) as an indented block."""
        try:
            if isinstance(data, dict):
                formatted = json.dumps(data, indent=2, ensure_ascii=False, default=str)
            elif isinstance(data, str):
                try:
                    formatted = json.dumps(json.loads(data), indent=2, ensure_ascii=False)
                except json.JSONDecodeError:
                    formatted = data
            else:
                formatted = str(data)
            self._logger.info("\n" + formatted)
        except (TypeError, ValueError) as e:
            self.log(f"Err format log: {e}")
            self.log(str(data))


def get_logger(logger: AppLogger | None) -> AppLogger:
    return logger if logger is not None else AppLogger()
