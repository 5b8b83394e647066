"""Audio feature extraction and synthetic verification datasets.

Real audio goes through a log-mel filter-bank front end; desk-scale
verification uses Gaussian cluster features generated in closed form, so the
whole pipeline can be exercised without any audio on disk.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureError
from .protocol import ManifestEntry, SplitManifest


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # mono, float
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FeatureError("waveform must be a nonempty 1-D array (mono only)")


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 10.0
    log_floor: float = 1e-10
    normalize: bool = True  # per-clip mean/variance over time, per mel bin
    target_seconds: float | None = None  # pad/center-crop clips to this length

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def fingerprint(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # [frames, n_mels], float32
    fingerprint: str

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters, [n_mels, n_fft//2 + 1]."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    filters = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-12)
        falling = (right - fft_freqs) / max(right - center, 1e-12)
        filters[m] = np.maximum(0.0, np.minimum(rising, falling))
    return filters


def _fit_length(samples: np.ndarray, target_len: int) -> np.ndarray:
    if samples.size < target_len:
        return np.pad(samples, (0, target_len - samples.size))
    if samples.size > target_len:
        start = (samples.size - target_len) // 2
        return samples[start : start + target_len]
    return samples


def extract_fbank(waveform: Waveform, config: FbankConfig) -> FeatureMap:
    """Log-mel filter-bank features, [frames, n_mels].

    Frame count for a clip of ``n`` samples is floor((n - win) / hop) + 1.
    Silence maps to log(log_floor) in every cell (before normalization).
    """
    if waveform.sample_rate != config.sample_rate:
        raise FeatureError(
            f"waveform sample rate {waveform.sample_rate} != configured "
            f"{config.sample_rate}; resampling is not supported"
        )
    samples = np.asarray(waveform.samples, dtype=np.float64)
    if config.target_seconds is not None:
        samples = _fit_length(samples, int(round(config.target_seconds * config.sample_rate)))

    win, hop = config.win_length, config.hop_length
    if samples.size < win:
        raise FeatureError(
            f"waveform of {samples.size} samples is shorter than one {win}-sample window"
        )
    n_frames = (samples.size - win) // hop + 1
    window = np.hamming(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window

    spectrum = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    filters = mel_filterbank(config.sample_rate, win, config.n_mels)
    mel_energy = spectrum @ filters.T
    logmel = np.log(np.maximum(mel_energy, config.log_floor))

    if config.normalize:
        mean = logmel.mean(axis=0, keepdims=True)
        std = logmel.std(axis=0, keepdims=True)
        logmel = (logmel - mean) / np.maximum(std, 1e-8)

    values = logmel.astype(np.float32)
    if not np.isfinite(values).all():
        raise FeatureError("non-finite values in extracted features")
    return FeatureMap(values=values, fingerprint=config.fingerprint())


def read_wav(path: str | Path) -> Waveform:
    """Read a mono PCM WAV file to a float waveform in [-1, 1]."""
    from scipy.io import wavfile

    path = Path(path)
    if not path.exists():
        raise FeatureError(f"audio file not found: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise FeatureError(f"{path}: only mono audio is supported, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples=samples, sample_rate=int(rate))


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian cluster dataset: class means spread by between_std, samples
    spread around their mean by within_std."""

    n_classes: int
    dim: int
    samples_per_class: int
    within_std: float
    between_std: float
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ValueError("n_classes and samples_per_class must be >= 1")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.within_std < 0 or self.between_std < 0:
            raise ValueError("standard deviations must be nonnegative")

    def fingerprint(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:16]


def synthetic_label(index: int) -> str:
    return f"class_{index:03d}"


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[np.ndarray, str]]:
    """Deterministic per seed; returns [(feature_vector, label)] in class order."""
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(0.0, spec.between_std, size=(spec.n_classes, spec.dim))
    dataset: list[tuple[np.ndarray, str]] = []
    for c in range(spec.n_classes):
        noise = rng.normal(0.0, spec.within_std, size=(spec.samples_per_class, spec.dim))
        for row in means[c] + noise:
            dataset.append((row.astype(np.float32), synthetic_label(c)))
    return dataset


@dataclass(frozen=True)
class SyntheticLayout:
    """Carves one synthetic dataset into a base session plus incremental
    sessions of new classes with train/test splits."""

    base_classes: int
    new_classes_per_session: int
    sessions: int  # number of incremental sessions
    train_per_class: int
    test_per_class: int
    dim: int
    within_std: float
    between_std: float
    seed: int = 0
    map_shape: tuple[int, int] | None = None  # reshape vectors to [frames, bins]

    def __post_init__(self):
        if self.map_shape is not None:
            frames, bins = self.map_shape
            if frames * bins != self.dim:
                raise ValueError(
                    f"map_shape {self.map_shape} does not flatten to dim {self.dim}"
                )

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.new_classes_per_session * self.sessions

    def to_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes=self.total_classes,
            dim=self.dim,
            samples_per_class=self.train_per_class + self.test_per_class,
            within_std=self.within_std,
            between_std=self.between_std,
            seed=self.seed,
        )


class SyntheticFeatureStore:
    """In-memory sample_ref -> feature array store for synthetic data."""

    def __init__(self, layout: SyntheticLayout):
        self.layout = layout
        self.fingerprint = layout.to_spec().fingerprint()
        self._arrays: dict[str, np.ndarray] = {}
        counters: dict[str, int] = {}
        for vector, label in generate_synthetic(layout.to_spec()):
            i = counters.get(label, 0)
            counters[label] = i + 1
            if layout.map_shape is not None:
                vector = vector.reshape(layout.map_shape)
            self._arrays[f"syn:{label}:{i:04d}"] = vector

    def get(self, ref: str) -> np.ndarray:
        try:
            return self._arrays[ref]
        except KeyError:
            raise FeatureError(f"unknown synthetic sample ref: {ref}") from None

    def batch(self, refs: list[str]) -> np.ndarray:
        return np.stack([self.get(r) for r in refs])


def synthetic_manifests(layout: SyntheticLayout) -> tuple[SplitManifest, list[SplitManifest]]:
    """Base and incremental SplitManifests matching SyntheticFeatureStore refs.

    Per class, the first train_per_class samples are train, the rest test.
    """
    per_class = layout.train_per_class + layout.test_per_class

    def entries(class_indices, split) -> list[ManifestEntry]:
        out = []
        for c in class_indices:
            label = synthetic_label(c)
            if split == "train":
                rows = range(layout.train_per_class)
            else:
                rows = range(layout.train_per_class, per_class)
            out.extend((f"syn:{label}:{i:04d}", label) for i in rows)
        return out

    base_idx = range(layout.base_classes)
    base = SplitManifest(train=entries(base_idx, "train"), test=entries(base_idx, "test"))
    incrementals = []
    for s in range(layout.sessions):
        start = layout.base_classes + s * layout.new_classes_per_session
        idx = range(start, start + layout.new_classes_per_session)
        incrementals.append(
            SplitManifest(train=entries(idx, "train"), test=entries(idx, "test"))
        )
    return base, incrementals


class AudioFeatureStore:
    """Extracts (and optionally caches) fbank features for manifest refs."""

    def __init__(self, root: str | Path, config: FbankConfig, cache_dir: str | Path | None = None):
        self.root = Path(root)
        self.config = config
        self.fingerprint = config.fingerprint()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, ref: str) -> Path:
        key = hashlib.sha1(ref.encode()).hexdigest()[:24]
        return self.cache_dir / f"{key}_{self.fingerprint}.npy"

    def get(self, ref: str) -> np.ndarray:
        if self.cache_dir:
            cached = self._cache_path(ref)
            if cached.exists():
                return np.load(cached)
        fmap = extract_fbank(read_wav(self.root / ref), self.config)
        if self.cache_dir:
            tmp = self._cache_path(ref).with_suffix(".tmp.npy")
            np.save(tmp, fmap.values)
            tmp.replace(self._cache_path(ref))
        return fmap.values

    def batch(self, refs: list[str]) -> np.ndarray:
        return np.stack([self.get(r) for r in refs])
