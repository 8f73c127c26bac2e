import logging
import os
import sys

from tqdm import tqdm

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
PROGRESS = os.environ.get("DUALCT_PROGRESS", "1") not in ("0", "false", "False", "")

messages = []


class MessageBuffer(logging.Handler):
    """Keeps every record as a (thread, component, level, message) tuple."""

    def emit(self, record):
        messages.append((record.threadName, record.name, record.levelname, record.getMessage()))


def _configure_root():
    root = logging.getLogger("dualct")
    if getattr(root, "_dualct_configured", False):
        return root
    root.setLevel(LOG_LEVEL.upper())
    root.addHandler(MessageBuffer())
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    console.setLevel(logging.WARNING)
    root.addHandler(console)
    root._dualct_configured = True
    return root


def get_logger(component: str) -> logging.Logger:
    _configure_root()
    return logging.getLogger(f"dualct.{component}")


def dump_messages(stream=None):
    stream = stream or sys.stderr
    print("---- LOG MESSAGES ----", file=stream)
    print(*messages, sep="\n", file=stream)
    print("----", file=stream)


def clear_messages():
    messages.clear()


def progress(iterable=None, **kwargs):
    """tqdm bar on stderr, silenced by DUALCT_PROGRESS=0."""
    kwargs.setdefault("disable", not PROGRESS)
    kwargs.setdefault("leave", False)
    return tqdm(iterable, **kwargs)
