"""Bit-stable named-array container.

Format: an uncompressed zip of little-endian float32 ``.npy`` entries, one
per named array, with entry names sorted and timestamps pinned, so the same
arrays always serialize to the same bytes. ``numpy.load`` reads the file
like a regular ``.npz`` archive.
"""

import io
import zipfile

import numpy as np

_PINNED_DATE = (1980, 1, 1, 0, 0, 0)


def save_named_arrays(path, arrays: dict) -> None:
    """Write ``{name: array}`` as float32 little-endian, deterministically."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, version=(1, 0))
            info = zipfile.ZipInfo(name + ".npy", date_time=_PINNED_DATE)
            zf.writestr(info, buf.getvalue())


def load_named_arrays(path) -> dict:
    """Read a container written by :func:`save_named_arrays`."""
    out = {}
    with zipfile.ZipFile(path, "r") as zf:
        for entry in zf.namelist():
            if not entry.endswith(".npy"):
                continue
            with zf.open(entry) as fh:
                out[entry[: -len(".npy")]] = np.lib.format.read_array(fh)
    return out
