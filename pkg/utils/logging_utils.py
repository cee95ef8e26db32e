import logging

import coloredlogs

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def setup_logging(level="INFO", logfile=None):
    """Colored console logging, plus an optional plain log file."""
    coloredlogs.install(level=level.upper(), fmt=LOG_FORMAT)
    if logfile is not None:
        handler = logging.FileHandler(logfile, encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
