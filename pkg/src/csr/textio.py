"""Small helpers shared by the text file formats.

Every persisted format in the toolkit renders floats with 9 significant
digits through :func:`fmt9` so that write -> read -> write reproduces the
file byte for byte.
"""

import os
import tempfile


def fmt9(x):
    """Render a float with 9 significant digits, normalising negative zero."""
    x = float(x)
    if x == 0.0:
        x = 0.0
    return f"{x:.9g}"


def atomic_write_text(path, text):
    """Write a text file atomically (temp file in the same dir, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
