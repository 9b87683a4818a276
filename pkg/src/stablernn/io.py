"""File formats: weight files, CSV records, run manifests and configs.

Weight files are JSON with every float written as a C99 hex-float string
(``float.hex``), so a save/load round trip is bit-exact::

    {"format": "stablernn-weights", "version": 1, "family": "rnn",
     "dims": {"d_in": 3, "d_h": 4},
     "matrices": {"W": {"shape": [4, 4], "data": ["0x1.0p-1", ...]}, ...},
     "readout": {"C": {...}, "D": {...}}}          # readout optional
"""
import configparser
import csv
import hashlib
import json
import os

import numpy as np

from .cells import ReadoutParams, params_class
from .errors import ConfigError

WEIGHTS_FORMAT = "stablernn-weights"


def _encode(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}


def _decode(name, obj):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.array([float.fromhex(v) for v in obj["data"]], dtype=float)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad matrix entry {name!r}: {e}") from None


def weights_to_dict(params, readout=None):
    doc = {"format": WEIGHTS_FORMAT, "version": 1, "family": params.family,
           "dims": {"d_in": params.input_dim, "d_h": params.hidden_dim},
           "matrices": {k: _encode(v) for k, v in params.arrays().items()}}
    if readout is not None:
        doc["readout"] = {k: _encode(v) for k, v in readout.arrays().items()}
    return doc


def weights_from_dict(doc):
    if not isinstance(doc, dict) or doc.get("format") != WEIGHTS_FORMAT:
        raise ConfigError("not a stablernn weight file")
    cls = params_class(doc.get("family"))
    mats = doc.get("matrices", {})
    try:
        params = cls(**{k: _decode(k, v) for k, v in mats.items()})
    except TypeError as e:
        raise ConfigError(f"weight file does not match family {cls.family!r}: {e}") from None
    readout = None
    if "readout" in doc:
        readout = ReadoutParams(**{k: _decode(k, v) for k, v in doc["readout"].items()})
    return params, readout


def save_weights(path, params, readout=None):
    with open(path, "w") as fh:
        json.dump(weights_to_dict(params, readout), fh, indent=1)
        fh.write("\n")


def load_weights(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    return weights_from_dict(doc)


def fmt_float(v):
    return format(float(v), ".17g")


def write_csv(path, columns, rows):
    """Write rows with a header; floats keep 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int, np.integer)) and not isinstance(v, bool)
                        else fmt_float(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, files, name="MANIFEST.txt"):
    """List ``files`` (paths relative to ``run_dir``) with their sha256."""
    lines = [f"{sha256_file(os.path.join(run_dir, f))}  {f}" for f in sorted(files)]
    path = os.path.join(run_dir, name)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_config(path):
    """Parse a sectioned ``key = value`` file into ``{section: {key: str}}``.

    Keys before any section header go under ``"run"``.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    with open(path) as fh:
        text = fh.read()
    shift = 0
    if not text.lstrip().startswith("["):
        text, shift = "[run]\n" + text, 1
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{path}: line {lineno - shift}: cannot parse {line.strip()!r}") from None
    except configparser.Error as e:
        lineno = getattr(e, "lineno", None)
        where = f"line {lineno - shift}: " if lineno else ""
        raise ConfigError(f"{path}: {where}{e.message}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def write_config(path, sections):
    with open(path, "w") as fh:
        for name, kv in sections.items():
            fh.write(f"[{name}]\n")
            for k, v in kv.items():
                fh.write(f"{k} = {v}\n")
            fh.write("\n")
