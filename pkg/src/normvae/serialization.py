"""Model files, NAM tables and report files.

Model file layout (little-endian)::

    b"NDEV" | u16 version | u16 n_sections
    n_sections x ( u8 name_len | name | u64 payload_len | payload )
    32-byte SHA-256 of everything above

Sections are ``config`` (UTF-8 JSON), ``scaler``, ``weights`` and ``sigma_n``
(raw float64 arrays), so weights round-trip bit-exactly.
"""

import csv
import hashlib
import io
import json
import math
import struct

import numpy as np

from .cvae import CvaeConfig, CvaeModel
from .data import FeatureScaler
from .errors import InputError, ModelFileError
from .estimators import NormVAE
from .normative import METHODS, NAM, NormativeVariance

MAGIC = b"NDEV"
FORMAT_VERSION = 1
SECTIONS = ("config", "scaler", "weights", "sigma_n")
NAM_COLUMNS = ("subject", "region_index", "method", "z", "p", "significant")


def _f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_f64(payload, expected, name):
    if len(payload) != 8 * expected:
        raise ModelFileError(f"section {name!r} holds {len(payload)} bytes, expected {8 * expected}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def model_to_bytes(est, extra=None):
    """Serialize a fitted :class:`NormVAE`; ``extra`` is stored in the config JSON."""
    cfg = est.config_
    meta = {
        "cvae": cfg.to_dict(),
        "estimator": est.get_params(),
        "seed": int(est.random_state),
        "sigma_n": {m: {"source": est.sigma_n_[m].source,
                        "n_controls": est.sigma_n_[m].n_controls} for m in METHODS},
        "loss_curve": {
            "epochs": int(est.loss_curve_.shape[0]),
            "initial_total": float(est.loss_curve_[0, 2]),
            "final_total": float(est.loss_curve_[-1, 2]),
        },
        "extra": extra or {},
    }
    sections = {
        "config": json.dumps(meta, sort_keys=True).encode("utf-8"),
        "scaler": _f64(np.concatenate([est.scaler_.mean_, est.scaler_.scale_,
                                       [est.scaler_.age_mean_, est.scaler_.age_scale_]])),
        "weights": _f64(est.model_.params),
        "sigma_n": _f64(np.concatenate([est.sigma_n_[m].sigma_n_sq for m in METHODS])),
    }
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HH", FORMAT_VERSION, len(SECTIONS)))
    for name in SECTIONS:
        payload = sections[name]
        raw = name.encode("ascii")
        out.write(struct.pack("<B", len(raw)) + raw)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def model_from_bytes(blob):
    """Inverse of :func:`model_to_bytes`; returns ``(estimator, extra)``."""
    if len(blob) < 8 + 32 or blob[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic or too short)")
    version, n_sections = struct.unpack_from("<HH", blob, 4)
    if version != FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported model file version {version} (this build reads {FORMAT_VERSION})"
        )
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFileError("checksum mismatch: file is truncated or corrupted")
    pos = 8
    sections = {}
    try:
        for _ in range(n_sections):
            (name_len,) = struct.unpack_from("<B", body, pos)
            pos += 1
            name = body[pos : pos + name_len].decode("ascii")
            pos += name_len
            (size,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if pos + size > len(body):
                raise ModelFileError(f"section {name!r} runs past end of file")
            sections[name] = body[pos : pos + size]
            pos += size
    except struct.error as exc:
        raise ModelFileError(f"truncated section table: {exc}") from exc
    missing = [s for s in SECTIONS if s not in sections]
    if missing or pos != len(body):
        raise ModelFileError(f"malformed section table (missing {missing})")

    try:
        meta = json.loads(sections["config"].decode("utf-8"))
        cfg = CvaeConfig.from_dict(meta["cvae"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"unreadable config section: {exc}") from exc
    D = cfg.input_dim
    scaler_vals = _read_f64(sections["scaler"], 2 * D + 2, "scaler")
    scaler = FeatureScaler()
    scaler.mean_ = scaler_vals[:D].copy()
    scaler.scale_ = scaler_vals[D : 2 * D].copy()
    scaler.age_mean_, scaler.age_scale_ = float(scaler_vals[-2]), float(scaler_vals[-1])

    n_params = CvaeModel(cfg).params.size
    params = _read_f64(sections["weights"], n_params, "weights")
    sig = _read_f64(sections["sigma_n"], D * len(METHODS), "sigma_n").reshape(len(METHODS), D)

    est = NormVAE(**meta["estimator"])
    est.config_ = cfg
    est.scaler_ = scaler
    est.n_features_in_ = D
    est.model_ = CvaeModel(cfg, params)
    est.sigma_n_ = {
        m: NormativeVariance(sig[i].copy(), meta["sigma_n"][m]["source"],
                             meta["sigma_n"][m]["n_controls"], m)
        for i, m in enumerate(METHODS)
    }
    est.loss_summary_ = meta["loss_curve"]
    return est, meta.get("extra", {})


def save_model(path, est, extra=None):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(est, extra))


def load_model(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(blob)


def _fmt(x):
    return repr(float(x))


def save_nams(path, nams, header=None):
    """Write NAMs as CSV, one row per (subject, region, method).

    ``header`` entries are written as a leading ``# key=value ...`` comment.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(NAM_COLUMNS)
        for nam in nams:
            for j in range(nam.z.size):
                writer.writerow([nam.subject, j, nam.method, _fmt(nam.z[j]),
                                 _fmt(nam.p[j]), int(bool(nam.significant[j]))])


def load_nams(path):
    """Read a NAM CSV; returns ``(nams, header)`` with NAMs in file order."""
    header = {}
    rows = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read NAM file {path}: {exc}") from exc
    while lines and lines[0].startswith("#"):
        for token in lines.pop(0)[1:].split():
            key, _, value = token.partition("=")
            header[key] = value
    reader = csv.reader(lines)
    cols = next(reader, None)
    if cols is None or tuple(cols) != NAM_COLUMNS:
        raise InputError(f"NAM file must have header {','.join(NAM_COLUMNS)}")
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(NAM_COLUMNS):
            raise InputError(f"NAM file line {lineno}: expected {len(NAM_COLUMNS)} fields")
        subject, j, method, z, p, sig = row
        try:
            rows.setdefault((method, subject), []).append(
                (int(j), float(z), float(p), bool(int(sig)))
            )
        except ValueError as exc:
            raise InputError(f"NAM file line {lineno}: {exc}") from None
    q = float(header.get("q", "nan"))
    nams = []
    for (method, subject), entries in rows.items():
        entries.sort()
        if [e[0] for e in entries] != list(range(len(entries))):
            raise InputError(f"NAM for {subject}/{method} has missing region indices")
        _, z, p, sig = zip(*entries)
        nams.append(NAM(subject, method, np.array(z), np.array(p), np.array(sig), q))
    return nams, header


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def save_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
