"""Binary dataset/model files, JSON run configs and CSV helpers.

Dataset file (little-endian)::

    b"HSCPDS01"  u32 N  u32 P  u32 S
    N x u32 site ids (1-based)
    u8 covariate flag, then N x f64 covariates when the flag is 1
    N x (P x P) f64 matrices, row-major

Model file (little-endian)::

    b"HSCPMD01"  u32 K  u32 P  u32 S  u32 N  u8 has_site  u8 has_twin
    K x u32 widths
    W_1..W_K, Lambda_1..Lambda_K, [U_1..U_K, V_1..V_K], [W~_1..W~_K]  (f64, row-major)
    u32 byte length + UTF-8 JSON hyperparameter echo
    u64 seed
"""

import csv
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .exceptions import BadMagic, InvalidParameter, InvariantViolation, ShapeMismatch, TruncatedFile
from .model import FactorModel, Hyperparams, MultiSiteDataset, check_correlation_matrix

DATASET_MAGIC = b"HSCPDS01"
MODEL_MAGIC = b"HSCPMD01"
F64 = np.dtype("<f8")
U32 = np.dtype("<u4")


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.what}: needs {self.pos + n} bytes, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    def finish(self):
        if self.pos != len(self.buf):
            raise TruncatedFile(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _check_magic(reader, magic):
    got = reader.take(len(magic))
    if got != magic:
        raise BadMagic(f"{reader.what}: expected magic {magic!r}, got {got!r}")


# -- datasets ----------------------------------------------------------------

def dataset_bytes(data):
    n, p = data.n_subjects, data.p
    parts = [DATASET_MAGIC, struct.pack("<III", n, p, data.n_sites),
             (data.sites + 1).astype(U32).tobytes()]
    if data.covariates is None:
        parts.append(b"\x00")
    else:
        cov = np.asarray(data.covariates, dtype=float).reshape(n)
        parts += [b"\x01", cov.astype(F64).tobytes()]
    parts.append(np.ascontiguousarray(data.matrices).astype(F64).tobytes())
    return b"".join(parts)


def save_dataset(data, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(data))


def load_dataset(path, validate=True):
    """Read a dataset file; every matrix is checked unless ``validate`` is False."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, str(path))
    _check_magic(r, DATASET_MAGIC)
    n, p, s = r.unpack("<III")
    sites = r.array(U32, (n,)).astype(np.int64)
    if n and (sites.min() < 1 or sites.max() > s):
        raise InvariantViolation(f"site ids must lie in 1..{s}")
    (flag,) = r.unpack("<B")
    if flag not in (0, 1):
        raise InvariantViolation(f"bad covariate flag {flag}")
    cov = r.array(F64, (n,)) if flag else None
    mats = r.array(F64, (n, p, p))
    r.finish()
    if validate:
        for i in range(n):
            check_correlation_matrix(mats[i], name=f"subject {i + 1}")
    return MultiSiteDataset(mats, sites - 1, s, cov)


# -- models ------------------------------------------------------------------

def _hp_echo(hp):
    if hp is None:
        return {}
    return hp.to_dict() if isinstance(hp, Hyperparams) else dict(hp)


def model_bytes(model, hp=None, seed=0, n_sites=None):
    k = model.widths
    has_site = model.has_site_terms
    has_twin = model.W_tilde is not None
    s = model.U[0].shape[0] if has_site else int(n_sites or 0)
    n = model.Lambda[0].shape[0]
    parts = [MODEL_MAGIC,
             struct.pack("<IIIIBB", model.depth, model.p, s, n, int(has_site), int(has_twin)),
             np.asarray(k, dtype=U32).tobytes()]
    blocks = list(model.W) + list(model.Lambda)
    if has_site:
        blocks += list(model.U) + list(model.V)
    if has_twin:
        blocks += list(model.W_tilde)
    parts += [np.ascontiguousarray(b).astype(F64).tobytes() for b in blocks]
    echo = json.dumps(_hp_echo(hp), sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(echo)), echo, struct.pack("<Q", int(seed))]
    return b"".join(parts)


def save_model(model, path, hp=None, seed=0):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model, hp, seed))


@dataclass
class ModelFile:
    model: FactorModel
    hyperparams: dict
    seed: int
    n_sites: int


def load_model_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, str(path))
    _check_magic(r, MODEL_MAGIC)
    depth, p, s, n, has_site, has_twin = r.unpack("<IIIIBB")
    if depth < 1:
        raise InvariantViolation("model file declares zero levels")
    widths = r.array(U32, (depth,)).astype(int).tolist()
    rows = [p] + widths[:-1]
    W = [r.array(F64, (a, b)) for a, b in zip(rows, widths)]
    lam = [r.array(F64, (n, k)) for k in widths]
    U = V = Wt = None
    if has_site:
        U = [r.array(F64, (s, p)) for _ in widths]
        V = [r.array(F64, (p, p)) for _ in widths]
    if has_twin:
        Wt = [r.array(F64, (a, b)) for a, b in zip(rows, widths)]
    (length,) = r.unpack("<I")
    echo = json.loads(r.take(length).decode("utf-8")) if length else {}
    (seed,) = r.unpack("<Q")
    r.finish()
    if echo.get("k") is not None and list(echo["k"]) != widths:
        raise ShapeMismatch(f"hyperparameter widths {echo['k']} disagree with header {widths}")
    return ModelFile(FactorModel(W, lam, U, V, Wt), echo, int(seed), int(s))


def load_model(path):
    return load_model_file(path).model


# -- run configuration ---------------------------------------------------------

_HP_KEYS = {f.name for f in fields(Hyperparams)}


@dataclass
class RunConfig:
    """Fit configuration read from JSON.

    ``method`` and ``widths`` are required.  Every other hyperparameter key
    accepted by :class:`Hyperparams` may appear at top level (``widths`` is
    the per-level ``k``; ``iterations`` is ``max_iters``).  ``paths`` may map
    ``data``, ``model``, ``report`` and ``trace`` to file names.
    """

    method: str
    hyperparams: Hyperparams
    init: str = "svd"
    paths: dict = field(default_factory=dict)

    REQUIRED = ("method", "widths")
    EXTRA = ("method", "widths", "iterations", "init", "paths")

    @classmethod
    def from_dict(cls, d):
        from .optimizer import METHODS

        d = dict(d)
        missing = [key for key in cls.REQUIRED if key not in d]
        if missing:
            raise InvalidParameter(f"config is missing required keys: {missing}")
        unknown = set(d) - _HP_KEYS - set(cls.EXTRA) - {"k"}
        if unknown:
            raise InvalidParameter(f"unknown config keys: {sorted(unknown)}")
        if "k" in d:
            raise InvalidParameter("use 'widths' rather than 'k'")
        if d["method"] not in METHODS + ("combat_hscp",):
            raise InvalidParameter(f"unknown method {d['method']!r}")
        method = d.pop("method")
        init = d.pop("init", "svd")
        paths = d.pop("paths", {}) or {}
        bad_paths = set(paths) - {"data", "model", "report", "trace"}
        if bad_paths:
            raise InvalidParameter(f"unknown path keys: {sorted(bad_paths)}")
        d["k"] = d.pop("widths")
        if "iterations" in d:
            d["max_iters"] = d.pop("iterations")
        if "max_iters" in d and "adv_start_iter" not in d:
            d["adv_start_iter"] = min(Hyperparams.adv_start_iter, d["max_iters"])
        return cls(method, Hyperparams.from_dict(d), init, dict(paths))

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidParameter("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self):
        d = self.hyperparams.to_dict()
        d["widths"] = d.pop("k")
        d["iterations"] = d.pop("max_iters")
        d.update(method=self.method, init=self.init, paths=dict(self.paths))
        return d


# -- CSV -------------------------------------------------------------------------

def write_csv(path, rows, columns=None):
    """Write a list of dicts; columns default to the keys of the first row."""
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row.get(c)) for c in columns})


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else x


def export_dataset_csv(data, path):
    """Long-format CSV (subject, site, row, col, value) for interoperability."""
    n, p = data.n_subjects, data.p
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "site", "row", "col", "value"])
        iu = np.triu_indices(p)
        for i in range(n):
            site = int(data.sites[i]) + 1
            for a, b in zip(*iu):
                w.writerow([i + 1, site, a + 1, b + 1, repr(float(data.matrices[i, a, b]))])
