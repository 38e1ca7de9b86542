import logging
import os

from rich.logging import RichHandler


def setup_logger(name, log_dir=None, log_filename="abnet.log", level=logging.INFO, console=True):
    """
    Set up and return a logger with file and (optionally) console handlers.

    Args:
        name (str): The logger name; "abnet" covers every library module.
        log_dir (str): Directory where the log file will be stored; None
            skips the file handler.
        log_filename (str): Log file name.
        level (int or str): Logging level.
        console (bool): Whether to add a rich console handler.

    Returns:
        logging.Logger: The configured logger.
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Clear out any existing handlers.
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers = []

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        file_handler = logging.FileHandler(os.path.join(log_dir, log_filename))
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    if console:
        console_handler = RichHandler(show_path=False, markup=False)
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(console_handler)

    return logger
