"""
Logger utility module for the PFPP engine.

A single process-wide logger with structured data support. Engine modules log
solver decisions, residuals and gate outcomes through it; the CLI decides where
the records go.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import ujson as json

LOGGER_NAME = "pfpp-engine"


class Logger:
    """
    Centralized logger for the PFPP engine.

    Provides a singleton logging interface with:
    - Structured data logging (JSON via ujson)
    - File and console handlers with separate levels
    - Timestamped log file naming

    Before ``init`` is called, records go to an unconfigured ``pfpp-engine`` stdlib
    logger, so library code (and tests) can log without setting anything up.

    Example:
        ```python
        Logger.init(log_dir=Path("./.logs"), file_level=logging.INFO, console_level=logging.WARNING)

        Logger.info("Period solved", {"period": 1, "route": "cmim", "residual": 3.1e-15})
        ```
    """

    _logger: Optional[logging.Logger] = None

    @classmethod
    def init(
        cls,
        log_dir: Path,
        file_level=logging.INFO,
        console_level=logging.WARNING,
        file_name: Optional[str] = None,
    ):
        """
        Initialize the logger with file and console handlers.

        Args:
            log_dir (Path): Directory to store log files. Created if missing.
            file_level (int, optional): Level for the file handler. Defaults to logging.INFO.
            console_level (int, optional): Level for the console handler. Defaults to logging.WARNING.
            file_name (str, optional): Log file name. Defaults to a timestamp.

        Note:
            Calling init() a second time logs a warning and keeps the first configuration.
        """
        if cls._logger is not None:
            cls._logger.warning("Logger already initialized")
            return

        log_dir.mkdir(parents=True, exist_ok=True)

        logger = logging.getLogger(LOGGER_NAME)
        logger.setLevel(logging.DEBUG)
        logger.propagate = True  # logfire picks records up from the root logger

        if file_name is None:
            file_name = f"{datetime.now().strftime('%Y-%m-%d__%H-%M-%S')}.log"
        log_file = log_dir / file_name

        formatter = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")

        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        file_handler.setLevel(file_level)
        logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler.setLevel(console_level)
        logger.addHandler(console_handler)

        cls._logger = logger
        cls._logger.debug(f"Logger initialized with log file: {log_file}")

    @classmethod
    def reset(cls):
        """Detach handlers and forget the configuration (used between CLI runs in one process)."""
        if cls._logger is None:
            return
        for handler in list(cls._logger.handlers):
            cls._logger.removeHandler(handler)
            handler.close()
        cls._logger = None

    @classmethod
    def get_logger(cls) -> logging.Logger:
        """
        Get the underlying logging.Logger instance.

        Returns the configured logger after ``init``; otherwise the bare stdlib logger
        of the same name.
        """
        if cls._logger is None:
            return logging.getLogger(LOGGER_NAME)

        return cls._logger

    @classmethod
    def debug(cls, message: str, data: Optional[Union[Dict[str, Any], str]] = None, *args, **kwargs):
        cls.get_logger().debug(cls._format_data(message, data), *args, **kwargs)

    @classmethod
    def info(cls, message: str, data: Optional[Union[Dict[str, Any], str]] = None, *args, **kwargs):
        """
        Log an info level message with optional structured data.

        Args:
            message (str): The log message.
            data (dict or str, optional): Extra payload. Dicts are JSON-encoded.

        Example:
            ```python
            Logger.info("Residual gate passed", {"period": 2, "residual": 4.2e-13})
            ```
        """
        cls.get_logger().info(cls._format_data(message, data), *args, **kwargs)

    @classmethod
    def warning(cls, message: str, data: Optional[Union[Dict[str, Any], str]] = None, *args, **kwargs):
        cls.get_logger().warning(cls._format_data(message, data), *args, **kwargs)

    @classmethod
    def error(cls, message: str, data: Optional[Union[Dict[str, Any], str]] = None, *args, **kwargs):
        cls.get_logger().error(cls._format_data(message, data), *args, **kwargs)

    @classmethod
    def critical(cls, message: str, data: Optional[Union[Dict[str, Any], str]] = None, *args, **kwargs):
        cls.get_logger().critical(cls._format_data(message, data), *args, **kwargs)

    @staticmethod
    def _format_data(message: str, data: Optional[Union[Dict[str, Any], str]] = None) -> str:
        """
        Append structured data to a message.

        Dict payloads are JSON-encoded; numpy scalars and other non-JSON values are
        stringified rather than failing the log call.
        """
        if data is None:
            return message

        if isinstance(data, dict):
            try:
                payload = json.dumps(data, ensure_ascii=False)
            except (TypeError, OverflowError):
                payload = json.dumps({key: str(value) for key, value in data.items()}, ensure_ascii=False)
        else:
            payload = data

        return f"{message} {' ' * (20 - len(message))} | Data: {payload}"
