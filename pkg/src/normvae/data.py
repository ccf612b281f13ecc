"""Cohort tables, preprocessing and the synthetic cohort generator."""

import csv
from dataclasses import asdict, dataclass, field, fields
import io
import logging
import math

import numpy as np

from .errors import CohortLoadError, ContractViolation, DegenerateVarianceError, InputError
from .numerics import RngStream

logger = logging.getLogger(__name__)

STAGES = ("CN", "SMC", "EMCI", "LMCI", "AD")
STAGE_CODE = {label: i for i, label in enumerate(STAGES)}
CONTROL = "CN"
FIXED_COLUMNS = ("id", "group", "age", "icv")


def region_columns(n_regions):
    return [f"v{j:03d}" for j in range(n_regions)]


@dataclass
class SubjectRecord:
    id: str
    group: str
    age: float
    icv: float
    volumes: np.ndarray

    def __post_init__(self):
        if self.group not in STAGE_CODE:
            raise ContractViolation(f"unknown group label {self.group!r}")
        if not self.icv > 0:
            raise ContractViolation(f"icv must be > 0 for subject {self.id}")


@dataclass
class Cohort:
    """Column-oriented cohort table; row order is preserved everywhere."""

    ids: list
    groups: list
    age: np.ndarray
    icv: np.ndarray
    volumes: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.groups = [str(g) for g in self.groups]
        self.age = np.asarray(self.age, dtype=np.float64).reshape(-1)
        self.icv = np.asarray(self.icv, dtype=np.float64).reshape(-1)
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        n = len(self.ids)
        if self.volumes.ndim != 2:
            self.volumes = self.volumes.reshape(n, -1)
        if not (len(self.groups) == self.age.size == self.icv.size == self.volumes.shape[0] == n):
            raise ContractViolation("cohort columns have inconsistent lengths")
        if len(set(self.ids)) != n:
            raise ContractViolation("subject ids must be unique")

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self)):
            yield self.record(i)

    @property
    def n_regions(self):
        return self.volumes.shape[1]

    @property
    def stage_codes(self):
        return np.array([STAGE_CODE[g] for g in self.groups], dtype=int)

    def record(self, i):
        return SubjectRecord(self.ids[i], self.groups[i], float(self.age[i]),
                             float(self.icv[i]), self.volumes[i])

    def subset(self, mask_or_index):
        idx = np.arange(len(self))[mask_or_index]
        return Cohort([self.ids[i] for i in idx], [self.groups[i] for i in idx],
                      self.age[idx], self.icv[idx], self.volumes[idx])

    def controls(self):
        return self.subset(np.array([g == CONTROL for g in self.groups], dtype=bool))

    def normalized(self):
        """ICV-normalized region volumes, shape (n, D)."""
        if len(self) and not np.all(self.icv > 0):
            raise ContractViolation("icv must be > 0")
        return self.volumes / self.icv[:, None]


def _fmt(value):
    return repr(float(value))


def write_cohort(cohort, path_or_buffer):
    cols = [*FIXED_COLUMNS, *region_columns(cohort.n_regions)]
    own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
    fh = open(path_or_buffer, "w", newline="", encoding="utf-8") if own else path_or_buffer
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(len(cohort)):
            writer.writerow([cohort.ids[i], cohort.groups[i], _fmt(cohort.age[i]),
                             _fmt(cohort.icv[i]), *map(_fmt, cohort.volumes[i])])
    finally:
        if own:
            fh.close()


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise CohortLoadError(f"non-numeric value {text!r} in column {column}", row) from None
    if not math.isfinite(value):
        raise CohortLoadError(f"non-finite value in column {column}", row)
    return value


def load_cohort(path):
    """Read and validate a cohort CSV (``id,group,age,icv,v000..``).

    Row numbers in error messages count the header as row 1.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CohortLoadError(f"cannot read cohort {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CohortLoadError("cohort file is empty (no header)") from None
    header = [h.strip() for h in header]
    if tuple(header[:4]) != FIXED_COLUMNS:
        missing = [c for c in FIXED_COLUMNS if c not in header]
        raise CohortLoadError(f"header must start with {','.join(FIXED_COLUMNS)}; missing {missing}", 1)
    n_regions = len(header) - 4
    if n_regions < 1 or header[4:] != region_columns(n_regions):
        raise CohortLoadError("region columns must be v000..v{D-1} in order", 1)

    ids, groups, ages, icvs, vols = [], [], [], [], []
    seen = set()
    for rownum, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CohortLoadError(f"expected {len(header)} columns, found {len(row)}", rownum)
        sid, group = row[0].strip(), row[1].strip()
        if group not in STAGE_CODE:
            raise CohortLoadError(f"unknown group label {group!r}", rownum)
        age = _parse_float(row[2], rownum, "age")
        icv = _parse_float(row[3], rownum, "icv")
        if icv <= 0:
            raise CohortLoadError(f"icv must be > 0 (got {icv})", rownum)
        v = [_parse_float(cell, rownum, header[4 + j]) for j, cell in enumerate(row[4:])]
        if min(v) < 0:
            raise CohortLoadError("region volumes must be >= 0", rownum)
        if sid in seen:
            raise CohortLoadError(f"duplicate subject id {sid!r}", rownum)
        seen.add(sid)
        ids.append(sid)
        groups.append(group)
        ages.append(age)
        icvs.append(icv)
        vols.append(v)
    volumes = np.array(vols, dtype=np.float64).reshape(len(ids), n_regions)
    return Cohort(ids, groups, np.array(ages), np.array(icvs), volumes)


def icv_normalize(record):
    if not record.icv > 0:
        raise ContractViolation("icv must be > 0")
    return np.asarray(record.volumes, dtype=np.float64) / record.icv


def split_controls(controls, fraction, seed):
    """Seeded split into (train, held_out) with ``floor(n * fraction)`` held out.

    Both parts keep the original row order.
    """
    if not 0 < fraction < 1:
        raise ContractViolation(f"held-out fraction must lie in (0, 1), got {fraction}")
    n = len(controls)
    n_held = int(math.floor(n * fraction))
    if n_held == 0 or n_held == n:
        raise ContractViolation(f"fraction {fraction} leaves an empty part for n={n}")
    perm = RngStream(seed).substream(7).permutation(n)
    held = np.zeros(n, dtype=bool)
    held[perm[:n_held]] = True
    return controls.subset(~held), controls.subset(held)


@dataclass
class SynthConfig:
    """Parameters of the synthetic cohort generator.

    Region volumes are generated at a reference head size and then scaled by
    ``icv / icv_mean``; ICV normalization therefore removes head size exactly.
    ``atrophy_sd`` and the age effect are expressed in units of each region's
    noise SD, so the noise share of variance differs between regions.
    """

    seed: int = 0
    counts: dict = field(default_factory=lambda: {"CN": 269, "SMC": 106, "EMCI": 312, "LMCI": 263, "AD": 181})
    n_regions: int = 120
    n_disease_regions: int = 30
    severity: dict = field(default_factory=lambda: {"CN": 0.0, "SMC": 0.25, "EMCI": 0.5, "LMCI": 1.0, "AD": 1.75})
    atrophy_sd: float = 2.0
    age_effect: tuple = (0.5, 2.0)
    noise_cv: tuple = (0.03, 0.10)
    base_volume: tuple = (1000.0, 12000.0)
    age_mean: float = 73.0
    age_sd: float = 7.0
    age_range: tuple = (55.0, 95.0)
    icv_mean: float = 1.5e6
    icv_sd: float = 1.5e5
    icv_min: float = 1.0e6

    def __post_init__(self):
        self.counts = {s: int(self.counts.get(s, 0)) for s in STAGES}
        self.severity = {s: float(self.severity.get(s, 0.0)) for s in STAGES}
        if any(c < 0 for c in self.counts.values()):
            raise ContractViolation("stage counts must be >= 0")
        sev = [self.severity[s] for s in STAGES]
        if any(b < a for a, b in zip(sev, sev[1:])) or sev[0] != 0.0:
            raise ContractViolation("severity must start at 0 for CN and be non-decreasing")
        if not 0 <= self.n_disease_regions <= self.n_regions:
            raise ContractViolation("n_disease_regions must lie in [0, n_regions]")
        for name in ("age_effect", "noise_cv", "base_volume", "age_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ContractViolation(f"{name} must be an increasing (low, high) pair")
            setattr(self, name, (float(lo), float(hi)))
        if self.age_sd <= 0 or self.icv_sd < 0 or self.icv_min <= 0:
            raise ContractViolation("age_sd must be > 0, icv_sd >= 0 and icv_min > 0")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @property
    def is_null(self):
        return all(v == 0.0 for v in self.severity.values())


@dataclass
class SynthTruth:
    disease_regions: np.ndarray
    atrophy: np.ndarray
    noise_sd: np.ndarray
    age_coef: np.ndarray
    base: np.ndarray
    n_floored: int

    @property
    def mask(self):
        m = np.zeros(self.base.size, dtype=bool)
        m[self.disease_regions] = True
        return m


def synth_generate(config):
    """Generate a cohort with planted atrophy; returns ``(cohort, truth)``.

    For subject *i* and region *j*, at the reference head size::

        v_ij = base_j - age_coef_j * (age_i - age_mean)
               - severity(stage_i) * atrophy_j * [j in disease set] + noise_ij

    with ``noise_ij ~ N(0, noise_sd_j^2)``; the stored raw volume is
    ``v_ij * icv_i / icv_mean`` floored at zero. Rows are shuffled.
    """
    root = RngStream(config.seed)
    D = config.n_regions
    region_rng = root.substream(0)
    lo, hi = np.log(config.base_volume)
    base = np.exp(region_rng.uniform(lo, hi, D))
    noise_sd = base * region_rng.uniform(*config.noise_cv, D)
    age_coef = noise_sd * region_rng.uniform(*config.age_effect, D) / config.age_sd
    if config.is_null:
        disease = np.array([], dtype=int)
    else:
        disease = np.sort(region_rng.permutation(D)[: config.n_disease_regions])
    atrophy = np.zeros(D)
    atrophy[disease] = config.atrophy_sd * noise_sd[disease]

    subj_rng = root.substream(1)
    groups = [s for s in STAGES for _ in range(config.counts[s])]
    n = len(groups)
    order = subj_rng.permutation(n)
    groups = [groups[i] for i in order]
    sev = np.array([config.severity[g] for g in groups])
    age = np.clip(config.age_mean + config.age_sd * subj_rng.normal(n), *config.age_range)
    icv = np.maximum(config.icv_mean + config.icv_sd * subj_rng.normal(n), config.icv_min)
    noise = subj_rng.normal((n, D)) * noise_sd
    ref = base - np.outer(age - config.age_mean, age_coef) - np.outer(sev, atrophy) + noise
    volumes = ref * (icv / config.icv_mean)[:, None]
    n_floored = int(np.count_nonzero(volumes < 0))
    if n_floored:
        logger.warning("synthetic generator floored %d negative volumes at 0", n_floored)
        volumes = np.maximum(volumes, 0.0)
    ids = [f"sub-{i:04d}" for i in range(n)]
    truth = SynthTruth(disease, atrophy, noise_sd, age_coef, base, n_floored)
    return Cohort(ids, groups, age, icv, volumes), truth


def truth_to_dict(config, truth):
    return {
        "seed": config.seed,
        "config": config.to_dict(),
        "disease_regions": [int(j) for j in truth.disease_regions],
        "severity": dict(config.severity),
        "atrophy": [float(a) for a in truth.atrophy],
        "noise_sd": [float(s) for s in truth.noise_sd],
        # noise SD of ICV-normalized features (reference head size)
        "noise_sd_normalized": [float(s / config.icv_mean) for s in truth.noise_sd],
        "n_floored": truth.n_floored,
    }


class FeatureScaler:
    """Per-region z-scoring fitted on control rows only; age is scaled too.

    Follows the scikit-learn transformer protocol: ``fit`` on ICV-normalized
    control volumes, ``transform`` for any subject.
    """

    def fit(self, X, age):
        X = np.asarray(X, dtype=np.float64)
        age = np.asarray(age, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ContractViolation("scaler needs at least 2 control rows")
        if age.size != X.shape[0]:
            raise ContractViolation("age length does not match row count")
        mean = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        bad = np.flatnonzero(~(sd > 0))
        if bad.size:
            raise DegenerateVarianceError(
                f"zero standard deviation in region(s) {bad.tolist()}", bad
            )
        age_sd = age.std(ddof=1)
        if not age_sd > 0:
            raise DegenerateVarianceError("zero standard deviation in age")
        self.mean_ = mean
        self.scale_ = sd
        self.age_mean_ = float(age.mean())
        self.age_scale_ = float(age_sd)
        return self

    @property
    def n_features_in_(self):
        return self.mean_.size

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean_.size:
            raise ContractViolation(
                f"expected {self.mean_.size} regions, got {X.shape[-1]}"
            )
        return (X - self.mean_) / self.scale_

    def transform_age(self, age):
        return (np.asarray(age, dtype=np.float64) - self.age_mean_) / self.age_scale_

    def fit_transform(self, X, age):
        return self.fit(X, age).transform(X)

    def inverse_transform(self, Z):
        return np.asarray(Z) * self.scale_ + self.mean_


def apply_scaler(scaler, record):
    return scaler.transform(icv_normalize(record)), float(scaler.transform_age(record.age))
