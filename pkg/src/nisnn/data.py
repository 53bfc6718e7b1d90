"""Dataset storage, CSV import, segmentation, LOSO splits and a synthetic generator.

Native store: one directory holding ``manifest.json`` and one file per trial,
``<subject>_<trial>.f32``, with C x D little-endian float32 values in row-major
order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IngestError

SCHEMA = "nisnn.dataset/1"
CSV_SCHEMA = "nisnn.csv-import/1"


@dataclass(frozen=True)
class TrialRef:
    subject: str
    trial: str
    label: int

    @property
    def key(self) -> str:
        return f"{self.subject}_{self.trial}"

    @property
    def filename(self) -> str:
        return f"{self.key}.f32"


@dataclass
class DatasetManifest:
    name: str
    channels: int
    samples: int
    trials: list[TrialRef]
    labels: tuple[int, ...] = (0, 1)
    sample_rate: float | None = None
    channel_names: list[str] | None = None
    downsampling: str = "none"
    extra: dict = field(default_factory=dict)
    root: Path | None = None

    @property
    def subjects(self) -> list[str]:
        return sorted({t.subject for t in self.trials})

    def trial_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for t in self.trials:
            counts[t.subject] = counts.get(t.subject, 0) + 1
        return dict(sorted(counts.items()))

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "channels": self.channels,
            "samples": self.samples,
            "labels": list(self.labels),
            "sample_rate": self.sample_rate,
            "channel_names": self.channel_names,
            "downsampling": self.downsampling,
            "subjects": [{"id": s, "trials": n} for s, n in self.trial_counts().items()],
            "trials": [{"subject": t.subject, "trial": t.trial, "label": t.label, "file": t.filename} for t in self.trials],
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, data: dict, root: Path | None = None) -> "DatasetManifest":
        if data.get("schema") != SCHEMA:
            raise IngestError(f"unsupported manifest schema {data.get('schema')!r}")
        trials = [TrialRef(str(t["subject"]), str(t["trial"]), int(t["label"])) for t in data["trials"]]
        return cls(
            name=data["name"],
            channels=int(data["channels"]),
            samples=int(data["samples"]),
            trials=trials,
            labels=tuple(data.get("labels", (0, 1))),
            sample_rate=data.get("sample_rate"),
            channel_names=data.get("channel_names"),
            downsampling=data.get("downsampling", "none"),
            extra=data.get("extra", {}),
            root=root,
        )


@dataclass
class Trial:
    subject: str
    trial: str
    label: int
    signal: np.ndarray  # (C, D) float32


@dataclass
class Dataset:
    """Manifest plus all signals held in memory as one (N, C, D) array."""

    manifest: DatasetManifest
    signals: np.ndarray
    labels: np.ndarray

    def trial(self, index: int) -> Trial:
        ref = self.manifest.trials[index]
        return Trial(ref.subject, ref.trial, ref.label, self.signals[index])

    def index_of(self, key: str) -> int:
        for i, ref in enumerate(self.manifest.trials):
            if ref.key == key or ref.trial == key:
                return i
        raise ContractError(f"no trial {key!r} in dataset {self.manifest.name!r}")


# -- native store ---------------------------------------------------------------


def _validate_trials(manifest: DatasetManifest) -> None:
    seen = set()
    for t in manifest.trials:
        if t.key in seen:
            raise IngestError(f"duplicate trial id {t.key!r}")
        seen.add(t.key)
        if t.label not in manifest.labels:
            raise IngestError(f"trial {t.key!r} has label {t.label} outside {manifest.labels}")


def write_dataset(root, manifest: DatasetManifest, signals: np.ndarray) -> Path:
    root = Path(root)
    _validate_trials(manifest)
    expected = (len(manifest.trials), manifest.channels, manifest.samples)
    if signals.shape != expected:
        raise IngestError(f"signals have shape {signals.shape}, manifest expects {expected}")
    root.mkdir(parents=True, exist_ok=True)
    for ref, sig in zip(manifest.trials, signals):
        (root / ref.filename).write_bytes(np.ascontiguousarray(sig, dtype="<f4").tobytes())
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text, encoding="utf-8", newline="\n")
    manifest.root = root
    return root


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise IngestError(f"no manifest.json in {root}")
    return DatasetManifest.from_json(json.loads(path.read_text(encoding="utf-8")), root)


def load_trial(manifest: DatasetManifest, ref: TrialRef) -> Trial:
    path = Path(manifest.root) / ref.filename
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != manifest.channels * manifest.samples:
        raise IngestError(f"{path}: {raw.size} values, expected {manifest.channels}x{manifest.samples}")
    return Trial(ref.subject, ref.trial, ref.label, raw.reshape(manifest.channels, manifest.samples).astype(np.float32))


def load_dataset(root) -> Dataset:
    manifest = load_manifest(root)
    _validate_trials(manifest)
    signals = np.stack([load_trial(manifest, ref).signal for ref in manifest.trials]) if manifest.trials else np.zeros(
        (0, manifest.channels, manifest.samples), np.float32
    )
    labels = np.array([t.label for t in manifest.trials], dtype=np.int64)
    return Dataset(manifest, signals, labels)


def save_dataset(root, dataset: Dataset) -> Path:
    return write_dataset(root, dataset.manifest, dataset.signals)


# -- CSV import -----------------------------------------------------------------


def import_csv(src, dst) -> DatasetManifest:
    """Ingest ``src/manifest.json`` plus one CSV per trial (C rows x D columns) into a native store.

    The source manifest is ``{"schema": "nisnn.csv-import/1", "name", "channels",
    "samples", "trials": [{"subject", "trial", "label", "file"}], ...}``.
    """
    src = Path(src)
    mpath = src / "manifest.json"
    if not mpath.is_file():
        raise IngestError(f"no manifest.json in {src}")
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    if meta.get("schema") != CSV_SCHEMA:
        raise IngestError(f"{mpath}: expected schema {CSV_SCHEMA!r}, got {meta.get('schema')!r}")
    C, D = int(meta["channels"]), int(meta["samples"])
    manifest = DatasetManifest(
        name=meta["name"],
        channels=C,
        samples=D,
        trials=[TrialRef(str(t["subject"]), str(t["trial"]), int(t["label"])) for t in meta["trials"]],
        labels=tuple(meta.get("labels", (0, 1))),
        sample_rate=meta.get("sample_rate"),
        channel_names=meta.get("channel_names"),
    )
    _validate_trials(manifest)
    signals = np.zeros((len(manifest.trials), C, D), dtype=np.float32)
    for i, entry in enumerate(meta["trials"]):
        path = src / entry["file"]
        if not path.is_file():
            raise IngestError(f"{path}: file not found")
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row]
        if len(rows) != C:
            raise IngestError(f"{path}: {len(rows)} rows, expected {C} channels x {D} samples")
        for r, row in enumerate(rows):
            if len(row) != D:
                raise IngestError(f"{path}: row {r} has {len(row)} columns, expected {C} channels x {D} samples")
            try:
                values = np.array([float(v) for v in row], dtype=np.float64)
            except ValueError as exc:
                raise IngestError(f"{path}: row {r}: {exc}") from None
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                raise IngestError(f"{path}: non-finite value at row {r}, column {bad[0]}")
            signals[i, r] = values
    write_dataset(dst, manifest, signals)
    return manifest


def export_csv(dataset: Dataset, dst) -> Path:
    """Inverse of ``import_csv``; values written with float32 round-trip precision."""
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    m = dataset.manifest
    entries = []
    for ref, sig in zip(m.trials, dataset.signals):
        fname = f"{ref.key}.csv"
        with (dst / fname).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in sig:
                writer.writerow([repr(float(np.float32(v))) for v in row])
        entries.append({"subject": ref.subject, "trial": ref.trial, "label": ref.label, "file": fname})
    meta = {"schema": CSV_SCHEMA, "name": m.name, "channels": m.channels, "samples": m.samples, "labels": list(m.labels), "trials": entries}
    (dst / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return dst


# -- preprocessing --------------------------------------------------------------


def downsample_indices(samples: int, target: int) -> np.ndarray:
    return np.floor(np.arange(target) * samples / target + 0.5).astype(np.int64).clip(0, samples - 1)


def downsample(trial: Trial, target: int) -> Trial:
    """Uniform index selection: keeps samples round(i * D / target)."""
    D = trial.signal.shape[-1]
    if target > D or target <= 0:
        raise ContractError(f"cannot downsample {D} samples to {target}")
    sig = trial.signal[..., downsample_indices(D, target)]
    return Trial(trial.subject, trial.trial, trial.label, np.ascontiguousarray(sig))


def segment(signal: np.ndarray, pieces: int, steps: int) -> np.ndarray:
    """(..., D) -> (..., S, T); timepiece s covers samples [s*T, (s+1)*T)."""
    D = signal.shape[-1]
    if pieces * steps != D:
        raise ConfigError(f"S*T must equal D: {pieces}*{steps} != {D}")
    return signal.reshape(signal.shape[:-1] + (pieces, steps))


# -- leave-one-subject-out ------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    held_out: str
    train: tuple[int, ...]
    test: tuple[int, ...]


def loso_splits(manifest: DatasetManifest) -> list[SplitPlan]:
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise ContractError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    plans = []
    for held in subjects:
        test = tuple(i for i, t in enumerate(manifest.trials) if t.subject == held)
        train = tuple(i for i, t in enumerate(manifest.trials) if t.subject != held)
        plans.append(SplitPlan(held, train, test))
    return plans


# -- synthetic data -------------------------------------------------------------

# cycles per sample of the injected oscillation, by class
SYNTH_FREQUENCIES = (1 / 20, 1 / 5)


def synth_generate(
    seed: int,
    n_subjects: int = 3,
    trials_per_subject: int = 60,
    channels: int = 20,
    samples: int = 400,
    difficulty: float = 0.0,
    name: str | None = None,
) -> Dataset:
    """Two-class set: a Hann-tapered oscillation at a class-specific frequency is
    injected into one window (25% of D) on a fixed half of the channels.

    Subjects differ by a gain in [0.8, 1.2]; additive Gaussian noise has standard
    deviation ``difficulty`` and is absent at difficulty 0.  Labels alternate
    within each subject so counts differ by at most one.
    """
    if min(n_subjects, trials_per_subject, channels, samples) <= 0:
        raise ConfigError("synthetic extents must be positive")
    rng = np.random.default_rng(seed)
    width = max(1, samples // 4)
    start = int(rng.integers(0, samples - width + 1))
    active = np.sort(rng.choice(channels, size=max(1, channels // 2), replace=False))
    taper = np.hanning(width + 2)[1:-1]
    n = np.arange(width)
    trials, signals = [], []
    for s in range(n_subjects):
        subject = f"S{s + 1:02d}"
        gain = rng.uniform(0.8, 1.2)
        labels = np.array([i % 2 for i in range(trials_per_subject)])
        rng.shuffle(labels)
        for k in range(trials_per_subject):
            label = int(labels[k])
            sig = np.zeros((channels, samples))
            phase = rng.uniform(0, 2 * np.pi, size=active.size)
            wave = np.sin(2 * np.pi * SYNTH_FREQUENCIES[label] * n[None, :] + phase[:, None]) * taper
            sig[active, start : start + width] = gain * wave
            if difficulty > 0:
                sig += rng.normal(0.0, difficulty, size=sig.shape)
            trials.append(TrialRef(subject, f"t{k:04d}", label))
            signals.append(sig.astype(np.float32))
    manifest = DatasetManifest(
        name=name or f"synth-seed{seed}",
        channels=channels,
        samples=samples,
        trials=trials,
        extra={
            "generator": "synth",
            "seed": seed,
            "difficulty": difficulty,
            "window": [start, start + width],
            "active_channels": active.tolist(),
            "frequencies": list(SYNTH_FREQUENCIES),
        },
    )
    return Dataset(manifest, np.stack(signals), np.array([t.label for t in trials], dtype=np.int64))


def band_power_feature(dataset: Dataset) -> np.ndarray:
    """Oracle feature: windowed power at the class-1 frequency minus power at the class-0 frequency."""
    extra = dataset.manifest.extra
    a, b = extra["window"]
    chans = extra["active_channels"]
    seg = dataset.signals[:, chans, a:b].astype(np.float64)
    n = np.arange(b - a)

    def power(freq):
        c = seg @ np.cos(2 * np.pi * freq * n)
        s = seg @ np.sin(2 * np.pi * freq * n)
        return (c**2 + s**2).sum(axis=1)

    f0, f1 = extra["frequencies"]
    return power(f1) - power(f0)
