import logging
import sys

from tqdm import tqdm

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"

# Shared by every command; False under TestingConfig
show_progress = True


def configure_logging(level='INFO', stream=None):
    """Install the one root handler all SplitHE modules log through."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_splithe', False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._splithe = True
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return root


def init_extensions(app_config):
    global show_progress
    show_progress = bool(app_config.SHOW_PROGRESS)
    configure_logging(app_config.LOG_LEVEL)


def progress(iterable, total=None, desc=None):
    """tqdm over batches; silent when disabled or when INFO is not logged."""
    disabled = not show_progress or not logging.getLogger().isEnabledFor(logging.INFO)
    return tqdm(iterable, total=total, desc=desc, leave=False, disable=disabled)
