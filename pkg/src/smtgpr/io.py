"""Matrix and model files.

binary-v1 layout (all little-endian)::

    b"KGPM" | u8 version=1 | u64 rows | u64 cols | rows*cols f64, column-major

A model file is ``b"KGPMODEL" | u8 version | u64 header_len | JSON header``
followed by one binary-v1 block per array named in the header.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .basis import OrthogonalBasis
from .baselines import MtKronprodModel, StgprModel
from .kernels import KernelParams, KernelSpec
from .kronecker import EigenDecomposition
from .model import ModelConfig, TrainedModel
from .optimize import OptimizerSettings

MAGIC = b"KGPM"
VERSION = 1
MODEL_MAGIC = b"KGPMODEL"
MODEL_VERSION = 1
FORMATS = ("csv", "binary-v1")
_HEADER = struct.Struct("<4sBQQ")
_MODEL_HEADER = struct.Struct("<8sBQ")


class FormatError(ValueError):
    pass


def infer_format(path):
    suffix = Path(path).suffix.lower()
    if suffix in (".csv", ".txt"):
        return "csv"
    if suffix in (".kgpm", ".bin"):
        return "binary-v1"
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "binary-v1" if head == MAGIC else "csv"


def _check_format(fmt, path):
    fmt = infer_format(path) if fmt is None else str(fmt).lower()
    if fmt == "binary":
        fmt = "binary-v1"
    if fmt not in FORMATS:
        raise FormatError(f"unknown matrix format {fmt!r}; expected one of {FORMATS}")
    return fmt


# ---------------------------------------------------------------------------
# binary-v1
# ---------------------------------------------------------------------------


def _matrix_2d(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise FormatError(f"only 1-D and 2-D arrays can be stored, got shape {a.shape}")
    return a


def write_binary(fh, a):
    a = _matrix_2d(a)
    fh.write(_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]))
    fh.write(a.astype("<f8").tobytes(order="F"))


def read_binary(fh):
    head = fh.read(_HEADER.size)
    if len(head) == 0:
        raise FormatError("empty binary matrix file")
    if len(head) < _HEADER.size:
        raise FormatError("truncated binary matrix header")
    magic, version, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported binary matrix version {version}")
    nbytes = 8 * rows * cols
    body = fh.read(nbytes)
    if len(body) != nbytes:
        raise FormatError(f"expected {nbytes} payload bytes for a {rows}x{cols} matrix, got {len(body)}")
    # C-contiguous so downstream BLAS calls match those on freshly computed arrays
    return np.ascontiguousarray(np.frombuffer(body, dtype="<f8").reshape((rows, cols), order="F"), dtype=np.float64)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _write_csv(fh, a, header=None):
    a = _matrix_2d(a)
    writer = csv.writer(fh, lineterminator="\r\n")
    if header is not None:
        if len(header) != a.shape[1]:
            raise FormatError(f"header has {len(header)} names for {a.shape[1]} columns")
        writer.writerow(header)
    for row in a:
        writer.writerow([format(v, ".17g") for v in row])


def _read_csv(fh, header=False):
    rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if header:
        rows = rows[1:]
    if not rows:
        raise FormatError("CSV file contains no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"CSV row {i + 1} has {len(r)} cells, expected {width}")
        try:
            out[i] = [float(c) for c in r]
        except ValueError as exc:
            raise FormatError(f"non-numeric cell in CSV row {i + 1}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# public matrix API
# ---------------------------------------------------------------------------


def load_matrix(path, format=None, header=False):
    """Read a matrix. ``format`` is inferred from the extension or magic when ``None``."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    fmt = _check_format(format, path)
    if fmt == "binary-v1":
        with open(path, "rb") as fh:
            a = read_binary(fh)
            if fh.read(1):
                raise FormatError("trailing bytes after binary matrix")
        return a
    with open(path, newline="") as fh:
        return _read_csv(fh, header=header)


def save_matrix(path, a, format=None, header=None):
    path = Path(path)
    fmt = _check_format(format or ("binary-v1" if path.suffix.lower() in (".kgpm", ".bin") else "csv"), path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "binary-v1":
        with open(path, "wb") as fh:
            write_binary(fh, a)
    else:
        with open(path, "w", newline="") as fh:
            _write_csv(fh, a, header=header)
    return path


def convert_matrix(src, dst, src_format=None, dst_format=None, header=False):
    a = load_matrix(src, src_format, header=header)
    return save_matrix(dst, a, dst_format)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _eig(prefix, arrays):
    return EigenDecomposition(arrays[f"{prefix}_vectors"], arrays[f"{prefix}_values"].ravel())


def _smtgpr_state(m):
    header = {
        "config": m.config.to_config(),
        "theta_c": m.theta_c.raw.tolist(),
        "theta_r": m.theta_r.raw.tolist(),
        "theta_sigma2": m.theta_sigma2,
        "basis_total_variance": m.basis.total_variance,
    }
    arrays = {
        "basis_b": m.basis.b,
        "basis_explained_variance": m.basis.explained_variance,
        "basis_column_means": m.basis.column_means,
        "train_x": m.train_x,
        "task_features": m.task_features,
        "eig_c_vectors": m.eig_c.vectors,
        "eig_c_values": m.eig_c.values,
        "eig_r_vectors": m.eig_r.vectors,
        "eig_r_values": m.eig_r.values,
        "k_tilde_inv_diag": m.k_tilde_inv_diag,
        "y_tilde": m.y_tilde,
    }
    return header, arrays


def _smtgpr_from(h, a):
    basis = OrthogonalBasis(
        a["basis_b"],
        a["basis_explained_variance"].ravel(),
        a["basis_column_means"].ravel(),
        h["basis_total_variance"],
    )
    return TrainedModel(
        config=ModelConfig.from_config(h["config"]),
        basis=basis,
        theta_c=KernelParams(h["theta_c"]),
        theta_r=KernelParams(h["theta_r"]),
        theta_sigma2=h["theta_sigma2"],
        train_x=a["train_x"],
        task_features=a["task_features"],
        eig_c=_eig("eig_c", a),
        eig_r=_eig("eig_r", a),
        k_tilde_inv_diag=a["k_tilde_inv_diag"].ravel(),
        y_tilde=a["y_tilde"],
        **h["meta"],
    )


def _kronprod_state(m):
    header = {
        "task_kernel": m.task_kernel.to_config(),
        "sample_kernel": m.sample_kernel.to_config(),
        "optimizer": m.optimizer.to_config(),
        "variance_batch": m.variance_batch,
        "theta_d": m.theta_d.raw.tolist(),
        "theta_r": m.theta_r.raw.tolist(),
        "theta_sigma2": m.theta_sigma2,
    }
    arrays = {
        "train_x": m.train_x,
        "task_features": m.task_features,
        "eig_d_vectors": m.eig_d.vectors,
        "eig_d_values": m.eig_d.values,
        "eig_r_vectors": m.eig_r.vectors,
        "eig_r_values": m.eig_r.values,
        "k_tilde_inv_diag": m.k_tilde_inv_diag,
        "y_tilde": m.y_tilde,
    }
    return header, arrays


def _kronprod_from(h, a):
    return MtKronprodModel(
        task_kernel=KernelSpec.from_config(h["task_kernel"]),
        sample_kernel=KernelSpec.from_config(h["sample_kernel"]),
        theta_d=KernelParams(h["theta_d"]),
        theta_r=KernelParams(h["theta_r"]),
        theta_sigma2=h["theta_sigma2"],
        train_x=a["train_x"],
        task_features=a["task_features"],
        eig_d=_eig("eig_d", a),
        eig_r=_eig("eig_r", a),
        k_tilde_inv_diag=a["k_tilde_inv_diag"].ravel(),
        y_tilde=a["y_tilde"],
        optimizer=OptimizerSettings.from_config(h["optimizer"]),
        variance_batch=h["variance_batch"],
        **h["meta"],
    )


def _stgpr_state(m):
    header = {"kernel": m.kernel.to_config(), "optimizer": m.optimizer.to_config()}
    arrays = {
        "raw": m.raw,
        "train_x": m.train_x,
        "train_y": m.train_y,
        "lml": m.lml,
        "converged": m.converged.astype(np.float64),
        "failed": m.failed.astype(np.float64),
    }
    return header, arrays


def _stgpr_from(h, a):
    return StgprModel(
        kernel=KernelSpec.from_config(h["kernel"]),
        raw=a["raw"],
        train_x=a["train_x"],
        train_y=a["train_y"],
        lml=a["lml"].ravel(),
        converged=a["converged"].ravel() > 0.5,
        failed=a["failed"].ravel() > 0.5,
        optimizer=OptimizerSettings.from_config(h["optimizer"]),
        warnings=tuple(h["meta"].get("warnings", ())),
    )


_KINDS = {
    "S-MTGPR": (TrainedModel, _smtgpr_state, _smtgpr_from),
    "MT-Kronprod": (MtKronprodModel, _kronprod_state, _kronprod_from),
    "STGPR": (StgprModel, _stgpr_state, _stgpr_from),
}


def _meta(model):
    if isinstance(model, StgprModel):
        return {"warnings": list(model.warnings)}
    return {
        "final_lml": model.final_lml,
        "initial_lml": model.initial_lml,
        "n_iter": model.n_iter,
        "n_eval": model.n_eval,
        "converged": bool(model.converged),
        "floor_count": model.floor_count,
        "warnings": list(model.warnings),
    }


def save_model(path, model, offset=None):
    """Write any of the three fitted model types to a versioned model file.

    ``offset`` optionally stores the per-task training means removed before
    fitting, so predictions can be mapped back to the original scale.
    """
    for kind, (cls, state, _) in _KINDS.items():
        if isinstance(model, cls):
            break
    else:
        raise FormatError(f"cannot serialize {type(model).__name__}")
    header, arrays = state(model)
    if offset is not None:
        arrays["offset"] = np.asarray(offset, dtype=np.float64).ravel()
    header["kind"] = kind
    header["meta"] = _meta(model)
    header["arrays"] = [[name, np.ndim(arr)] for name, arr in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            write_binary(fh, arr)
    return path


def load_model(path, with_offset=False):
    """Read a model file; ``with_offset=True`` returns ``(model, offset or None)``."""
    with open(path, "rb") as fh:
        head = fh.read(_MODEL_HEADER.size)
        if len(head) < _MODEL_HEADER.size:
            raise FormatError("truncated or empty model file")
        magic, version, length = _MODEL_HEADER.unpack(head)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model file version {version}")
        raw = fh.read(length)
        if len(raw) != length:
            raise FormatError("truncated model header")
        header = json.loads(raw.decode("utf-8"))
        arrays = {}
        for name, ndim in header["arrays"]:
            a = read_binary(fh)
            arrays[name] = a.ravel() if ndim == 1 else a
        if fh.read(1):
            raise FormatError("trailing bytes after model arrays")
    kind = header.get("kind")
    if kind not in _KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    offset = arrays.pop("offset", None)
    model = _KINDS[kind][2](header, arrays)
    return (model, offset) if with_offset else model

