"""Dataset model: on-disk manifest format, windowing, and synthetic corpora.

A corpus is a flat list of fixed-length windows, each tagged with a
(subject, session, block, trial) identity. Values are float64 throughout;
the manifest stores them as raw little-endian float64 matrices next to a
JSON header (see ``load_manifest`` / ``write_manifest``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MANIFEST_NAME = "dataset.json"
MANIFEST_FORMAT_VERSION = 1


@dataclass(frozen=True, order=True)
class DomainKey:
    """Identity of a sample: which subject/session/block/trial produced it."""

    subject: int
    session: int
    block: int
    trial: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.subject, self.session, self.block, self.trial)


@dataclass
class WindowSample:
    """One fixed-length window with its label and provenance.

    ``values`` has shape (S, D) with D = spatial_groups * per-channel
    features, laid out channel-major (channel g occupies columns
    [g*F, (g+1)*F)). ``window_start`` is the window's start offset inside
    its trial; together with ``key`` it identifies the sample.
    """

    values: np.ndarray
    label: int
    key: DomainKey
    spatial_groups: int = 1
    window_start: int = 0

    def identity(self) -> tuple:
        return self.key.as_tuple() + (self.window_start,)


@dataclass
class DatasetIndex:
    """Immutable, memory-resident collection of windows plus axis metadata.

    Iteration order is the manifest order and is deterministic. The stacked
    arrays (``values_array`` etc.) are built once on construction and shared
    by reference; treat them as read-only.
    """

    samples: list[WindowSample]
    shape: tuple[int, int, int]  # (S, D, G)
    class_count: int
    sample_rate_hz: float
    provenance: str = ""
    values_array: np.ndarray = field(init=False, repr=False)
    labels_array: np.ndarray = field(init=False, repr=False)
    keys_array: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s, d, g = self.shape
        if s <= 0 or d <= 0 or g <= 0 or d % g != 0:
            raise DataError(f"invalid shape {self.shape}: need S,D,G > 0 and G | D")
        if self.class_count < 1:
            raise DataError("class_count must be >= 1")
        if self.sample_rate_hz <= 0:
            raise DataError("sample_rate_hz must be positive")
        n = len(self.samples)
        vals = np.zeros((n, s, d), dtype=np.float64)
        labels = np.zeros(n, dtype=np.int64)
        keys = np.zeros((n, 4), dtype=np.int64)
        for i, smp in enumerate(self.samples):
            v = np.ascontiguousarray(smp.values, dtype=np.float64)
            if v.shape != (s, d):
                raise DataError(
                    f"sample {smp.key.as_tuple()} has shape {v.shape}, expected {(s, d)}"
                )
            if not np.isfinite(v).all():
                raise DataError(f"sample {smp.key.as_tuple()} contains NaN/Inf values")
            if not (0 <= smp.label < self.class_count):
                raise DataError(
                    f"sample {smp.key.as_tuple()} label {smp.label} outside "
                    f"[0, {self.class_count})"
                )
            vals[i] = v
            labels[i] = smp.label
            keys[i] = smp.key.as_tuple()
        object.__setattr__(self, "values_array", vals)
        object.__setattr__(self, "labels_array", labels)
        object.__setattr__(self, "keys_array", keys)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def spatial_groups(self) -> int:
        return self.shape[2]

    def subjects(self) -> list[int]:
        return sorted(set(int(k[0]) for k in self.keys_array))

    def subset(self, indices) -> "DatasetIndex":
        """New index containing the selected samples, manifest order kept."""
        idx = sorted(int(i) for i in indices)
        return DatasetIndex(
            samples=[self.samples[i] for i in idx],
            shape=self.shape,
            class_count=self.class_count,
            sample_rate_hz=self.sample_rate_hz,
            provenance=self.provenance,
        )

    def equals(self, other: "DatasetIndex") -> bool:
        """Bit-exact equality of shape, labels, keys, and values."""
        if self.shape != other.shape or self.class_count != other.class_count:
            return False
        if self.sample_rate_hz != other.sample_rate_hz:
            return False
        if len(self) != len(other):
            return False
        return (
            np.array_equal(self.labels_array, other.labels_array)
            and np.array_equal(self.keys_array, other.keys_array)
            and np.array_equal(self.values_array, other.values_array)
        )


@dataclass
class SynthConfig:
    """Knobs for the hierarchical synthetic corpus generator.

    Per-subject / per-session / per-block offsets are drawn i.i.d. normal
    with the given standard deviations and added (broadcast over time) to a
    fixed per-class temporal template scaled by ``class_signal``, plus
    per-entry noise of ``noise_std``.
    """

    subjects: int = 6
    sessions_per_subject: int = 2
    blocks_per_session: int = 3
    trials_per_block: int = 12
    timesteps: int = 16
    features: int = 4
    spatial_groups: int = 2
    class_count: int = 2
    subject_shift: float = 0.5
    session_shift: float = 0.25
    block_shift: float = 1.0
    class_signal: float = 1.0
    noise_std: float = 0.5
    sample_rate_hz: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("subjects", "sessions_per_subject", "blocks_per_session",
                     "trials_per_block", "timesteps", "features",
                     "spatial_groups", "class_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be a positive integer")
        for name in ("subject_shift", "session_shift", "block_shift", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"synth.{name} must be non-negative")
        if self.class_signal <= 0:
            raise ConfigError("synth.class_signal must be positive")
        if self.features % self.spatial_groups != 0:
            raise ConfigError("synth.spatial_groups must divide synth.features")
        if self.sample_rate_hz <= 0:
            raise ConfigError("synth.sample_rate_hz must be positive")


def class_template(label: int, timesteps: int, features: int, class_signal: float) -> np.ndarray:
    """Fixed smooth temporal template for one class, shape (S, D).

    Each class pairs a distinct per-dimension mean level with a weaker
    oscillation at c+1 cycles per window. Most of the separation lives in
    the time-averaged profile, the way level-coded physiological responses
    behave, which puts it in the same subspace as the additive block and
    subject offsets; the temporal shape is a secondary cue.
    """
    t = np.arange(timesteps, dtype=np.float64)[:, None]
    d = np.arange(features, dtype=np.float64)[None, :]
    phase = 2.0 * np.pi * d / max(features, 1)
    level = np.cos((label + 1) * phase + label)
    shape = np.sin(2.0 * np.pi * (label + 1) * t / timesteps + phase)
    return class_signal * (level + 0.25 * shape)


def synth_generate(cfg: SynthConfig) -> DatasetIndex:
    """Generate a deterministic synthetic corpus with hierarchical shift.

    Standard normals are drawn for every offset regardless of the shift
    magnitudes and scaled afterwards, so changing a shift value does not
    reshuffle the remaining draws for the same seed.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    s_len, d_len, m = cfg.timesteps, cfg.features, cfg.class_count
    templates = [class_template(c, s_len, d_len, cfg.class_signal) for c in range(m)]

    samples: list[WindowSample] = []
    for subj in range(cfg.subjects):
        subj_off = rng.standard_normal(d_len) * cfg.subject_shift
        for sess in range(cfg.sessions_per_subject):
            sess_off = rng.standard_normal(d_len) * cfg.session_shift
            for blk in range(cfg.blocks_per_session):
                blk_off = rng.standard_normal(d_len) * cfg.block_shift
                base = subj_off + sess_off + blk_off
                for trial in range(cfg.trials_per_block):
                    label = (trial + blk) % m
                    noise = rng.standard_normal((s_len, d_len)) * cfg.noise_std
                    values = templates[label] + base[None, :] + noise
                    samples.append(
                        WindowSample(
                            values=values,
                            label=label,
                            key=DomainKey(subj, sess, blk, trial),
                            spatial_groups=cfg.spatial_groups,
                        )
                    )
    return DatasetIndex(
        samples=samples,
        shape=(s_len, d_len, cfg.spatial_groups),
        class_count=m,
        sample_rate_hz=cfg.sample_rate_hz,
        provenance=f"synthetic seed={cfg.seed}",
    )


def slice_windows(
    trial_series: np.ndarray,
    window_len: int,
    stride: int,
    key: DomainKey,
    label: int,
    spatial_groups: int = 1,
) -> list[WindowSample]:
    """Slide a window over one trial's series, shape (T_total, D).

    Window i covers rows [i*stride, i*stride + window_len); the number of
    windows is floor((T_total - window_len) / stride) + 1.
    """
    series = np.asarray(trial_series, dtype=np.float64)
    if series.ndim != 2:
        raise DataError("trial_series must be a 2-D (T_total, D) array")
    t_total = series.shape[0]
    if stride < 1:
        raise DataError("stride must be >= 1")
    if window_len > t_total:
        raise DataError(
            f"window_len {window_len} exceeds trial length {t_total} "
            f"for {key.as_tuple()}"
        )
    count = (t_total - window_len) // stride + 1
    return [
        WindowSample(
            values=series[i * stride : i * stride + window_len].copy(),
            label=label,
            key=key,
            spatial_groups=spatial_groups,
            window_start=i * stride,
        )
        for i in range(count)
    ]


# --- manifest I/O ---------------------------------------------------------


def _manifest_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    return p


def load_manifest(path) -> DatasetIndex:
    """Load a dataset directory (or its ``dataset.json``) into memory.

    Shape/label/NaN violations are rejected with the offending sample's
    DomainKey in the message.
    """
    manifest = _manifest_path(path)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    try:
        header = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest}: {exc}") from exc

    for field_name in ("format_version", "shape", "class_count", "sample_rate_hz", "samples"):
        if field_name not in header:
            raise DataError(f"manifest missing required field '{field_name}'")
    if header["format_version"] != MANIFEST_FORMAT_VERSION:
        raise DataError(
            f"unsupported manifest format_version {header['format_version']}"
        )
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3):
        raise DataError("manifest 'shape' must be a [S, D, G] triple")
    s_len, d_len, groups = (int(x) for x in shape)
    class_count = int(header["class_count"])
    sample_rate = float(header["sample_rate_hz"])
    base_dir = manifest.parent
    row_bytes = s_len * d_len * 8

    blobs: dict[str, np.ndarray] = {}
    samples: list[WindowSample] = []
    occurrence: dict[tuple, int] = {}
    for row in header["samples"]:
        try:
            key = DomainKey(int(row["subject"]), int(row["session"]),
                            int(row["block"]), int(row["trial"]))
            label = int(row["label"])
            fname = row["file"]
            offset = int(row["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest sample row {row!r}: {exc}") from exc
        if fname not in blobs:
            fpath = base_dir / fname
            if not fpath.is_file():
                raise DataError(f"matrix file not found: {fpath} (sample {key.as_tuple()})")
            blobs[fname] = np.fromfile(fpath, dtype="<f8")
        blob = blobs[fname]
        if offset < 0 or offset % 8 != 0 or offset + row_bytes > blob.nbytes:
            raise DataError(
                f"sample {key.as_tuple()}: matrix at offset {offset} does not fit "
                f"declared shape {(s_len, d_len)} in '{fname}'"
            )
        values = blob[offset // 8 : offset // 8 + s_len * d_len]
        values = values.astype(np.float64).reshape(s_len, d_len)
        if not np.isfinite(values).all():
            raise DataError(f"sample {key.as_tuple()} contains NaN/Inf values")
        tup = key.as_tuple()
        window_start = int(row.get("window", occurrence.get(tup, 0)))
        occurrence[tup] = occurrence.get(tup, 0) + 1
        samples.append(
            WindowSample(values=values, label=label, key=key,
                         spatial_groups=groups, window_start=window_start)
        )
    return DatasetIndex(
        samples=samples,
        shape=(s_len, d_len, groups),
        class_count=class_count,
        sample_rate_hz=sample_rate,
        provenance=str(header.get("provenance", "")),
    )


def write_manifest(index: DatasetIndex, out_dir, data_file: str = "values.bin") -> Path:
    """Write ``dataset.json`` plus one packed float64 matrix file.

    Deterministic: sample order, offsets and JSON layout depend only on the
    index contents. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s_len, d_len, groups = index.shape
    rows = []
    offset = 0
    with open(out / data_file, "wb") as fh:
        for smp in index.samples:
            fh.write(np.ascontiguousarray(smp.values, dtype="<f8").tobytes())
            rows.append({
                "subject": smp.key.subject,
                "session": smp.key.session,
                "block": smp.key.block,
                "trial": smp.key.trial,
                "label": int(smp.label),
                "file": data_file,
                "offset": offset,
                "window": int(smp.window_start),
            })
            offset += s_len * d_len * 8
    header = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "shape": [s_len, d_len, groups],
        "class_count": index.class_count,
        "sample_rate_hz": index.sample_rate_hz,
        "provenance": index.provenance,
        "samples": rows,
    }
    manifest = out / MANIFEST_NAME
    manifest.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return manifest


# --- validation -----------------------------------------------------------


@dataclass
class ValidationReport:
    """Per-axis counts and invariant violations for one DatasetIndex."""

    n_samples: int
    n_trials: int
    subjects: int
    sessions_per_subject: dict[int, int]
    blocks_per_session: dict[tuple[int, int], int]
    trials_per_block: dict[tuple[int, int, int], int]
    trials_per_subject: dict[int, int]
    class_counts: dict[int, int]
    violations: list[str]

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_trials": self.n_trials,
            "subjects": self.subjects,
            "sessions_per_subject": {str(k): v for k, v in self.sessions_per_subject.items()},
            "blocks_per_session": {f"{k[0]}/{k[1]}": v for k, v in self.blocks_per_session.items()},
            "trials_per_block": {f"{k[0]}/{k[1]}/{k[2]}": v for k, v in self.trials_per_block.items()},
            "trials_per_subject": {str(k): v for k, v in self.trials_per_subject.items()},
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
            "violations": self.violations,
            "passed": self.passed,
        }


def validate_dataset(index: DatasetIndex) -> ValidationReport:
    """Scan the index for axis structure and invariant violations.

    Violations (duplicates, shape/label/NaN problems) become report entries
    rather than exceptions, so a report can describe a broken corpus.
    """
    s_len, d_len, groups = index.shape
    violations: list[str] = []
    sessions: dict[int, set[int]] = {}
    blocks: dict[tuple[int, int], set[int]] = {}
    trials: dict[tuple[int, int, int], set[int]] = {}
    trials_per_subject: dict[int, set] = {}
    class_counts: dict[int, int] = {}
    seen: set[tuple] = set()

    for smp in index.samples:
        k = smp.key
        sessions.setdefault(k.subject, set()).add(k.session)
        blocks.setdefault((k.subject, k.session), set()).add(k.block)
        trials.setdefault((k.subject, k.session, k.block), set()).add(k.trial)
        trials_per_subject.setdefault(k.subject, set()).add(k.as_tuple())
        class_counts[smp.label] = class_counts.get(smp.label, 0) + 1
        ident = smp.identity()
        if ident in seen:
            violations.append(
                f"duplicate sample {k.as_tuple()} window_start={smp.window_start}"
            )
        seen.add(ident)
        if smp.values.shape != (s_len, d_len):
            violations.append(f"sample {k.as_tuple()} shape {smp.values.shape} != {(s_len, d_len)}")
        if not np.isfinite(smp.values).all():
            violations.append(f"sample {k.as_tuple()} contains NaN/Inf")
        if not (0 <= smp.label < index.class_count):
            violations.append(f"sample {k.as_tuple()} label {smp.label} out of range")
        if smp.spatial_groups != groups:
            violations.append(
                f"sample {k.as_tuple()} spatial_groups {smp.spatial_groups} != {groups}"
            )
    n_trials = sum(len(v) for v in trials.values())
    return ValidationReport(
        n_samples=len(index),
        n_trials=n_trials,
        subjects=len(sessions),
        sessions_per_subject={s: len(v) for s, v in sorted(sessions.items())},
        blocks_per_session={k: len(v) for k, v in sorted(blocks.items())},
        trials_per_block={k: len(v) for k, v in sorted(trials.items())},
        trials_per_subject={s: len(v) for s, v in sorted(trials_per_subject.items())},
        class_counts=dict(sorted(class_counts.items())),
        violations=violations,
    )
