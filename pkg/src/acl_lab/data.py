"""Positive-pair data: a synthetic clustered-vector generator and an audio
path (WAV -> log-mel -> crops -> mix-back -> time-frequency augmentations).

Vector augmentation draws from the vectorized Philox counters in ``rng`` so
that each (item, view, epoch) owns its numbers. Audio augmentations take a
``numpy.random.Generator`` from ``rng.stream``.
"""

import csv
import math
import os
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .errors import DataError, ShapeMismatch, TooShort
from .numerics import ZERO_NORM, as_matrix, as_vector

LOG_EPS = 1e-10
MAX_RESAMPLE = 8


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_classes: int = 4
    n_per_class: int = 200
    dim: int = 16
    cluster_spread: float = 0.3
    noise_aug: float = 0.1
    mask_prob: float = 0.1
    scale_range: tuple = (0.8, 1.25)
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.n_per_class, self.dim) < 1:
            raise ValueError("n_classes, n_per_class and dim must be >= 1")
        if self.cluster_spread < 0 or self.noise_aug < 0:
            raise ValueError("cluster_spread and noise_aug must be >= 0")
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass
class LabeledData:
    x: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray = None

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        return LabeledData(self.x[idx], self.labels[idx], self.centroids)


def generate_synthetic(spec: SyntheticDatasetSpec) -> LabeledData:
    """Class centroids uniform on the unit sphere plus isotropic Gaussian scatter.

    Rows are ordered class by class; item i draws from its own stream.
    """
    g = rngmod.stream(spec.seed, rngmod.DATASET, 0)
    centroids = g.normal(size=(spec.n_classes, spec.dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    n = spec.n_classes * spec.n_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    u = rngmod.counter_uniforms(spec.seed, rngmod.DATASET, np.arange(n), 0, 0, 2 * spec.dim)
    noise = rngmod.box_muller(u[:, :spec.dim], u[:, spec.dim:])
    x = centroids[labels] + spec.cluster_spread * noise
    return LabeledData(x, labels, centroids)


def train_test_split(data: LabeledData, test_fraction, seed):
    """Stratified split; the same ``seed`` always yields the same partition."""
    if test_fraction <= 0:
        return data, data.subset(np.arange(0))
    g = rngmod.stream(seed, rngmod.SPLIT)
    train_idx, test_idx = [], []
    for c in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[g.permutation(idx.shape[0])]
        k = int(round(test_fraction * idx.shape[0]))
        test_idx.append(np.sort(idx[:k]))
        train_idx.append(np.sort(idx[k:]))
    return data.subset(np.concatenate(train_idx)), data.subset(np.concatenate(test_idx))


def write_dataset_csv(data: LabeledData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"feature_{i}" for i in range(data.x.shape[1])])
        for lab, row in zip(data.labels, data.x):
            w.writerow([str(int(lab))] + [repr(float(v)) for v in row])


def read_dataset_csv(path) -> LabeledData:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or not rows[0] or rows[0][0] != "label":
        raise DataError(f"{path}: expected a header starting with 'label'")
    width = len(rows[0])
    labels, x = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
            x.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not x:
        raise DataError(f"{path}: no data rows")
    x = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"{path}: non-finite feature values")
    return LabeledData(x, np.array(labels, dtype=np.int64))


# ------------------------------------------------------- vector augmentation

@dataclass(frozen=True)
class RngAddress:
    """Address of one augmentation draw: (seed, item, view, epoch)."""

    seed: int
    item: int
    view: int = 0
    epoch: int = 0


def _vector_draws(spec, seed, items, view, epoch, attempt, dim):
    # per row: 2*dim uniforms -> dim normals, dim mask uniforms, 1 scale uniform
    u = rngmod.counter_uniforms(seed, rngmod.AUGMENT, items, view + 2 * attempt, epoch, 3 * dim + 1)
    noise = rngmod.box_muller(u[:, :dim], u[:, dim:2 * dim])
    mask_u = u[:, 2 * dim:3 * dim]
    lo, hi = spec.scale_range
    scale = lo + (hi - lo) * u[:, 3 * dim]
    return noise, scale, mask_u


def augment_batch(x, spec: SyntheticDatasetSpec, seed, items, view, epoch=0):
    """Augment rows of ``x``; row r uses the stream of (seed, items[r], view, epoch).

    Scale by a random positive factor, add Gaussian noise (std ``noise_aug``),
    zero each coordinate with probability ``mask_prob``. A row that comes out
    (numerically) zero is redrawn up to 8 times, then passed through unchanged.
    """
    x = as_matrix(x)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    n, dim = x.shape
    out = np.empty_like(x)
    todo = np.arange(n)
    for attempt in range(MAX_RESAMPLE + 1):
        if attempt == MAX_RESAMPLE:
            out[todo] = x[todo]
            break
        noise, scale, mask_u = _vector_draws(spec, seed, items[todo], view, epoch, attempt, dim)
        aug = x[todo] * scale[:, None] + spec.noise_aug * noise
        aug = np.where(mask_u < spec.mask_prob, 0.0, aug)
        out[todo] = aug
        bad = np.sqrt(np.einsum("ij,ij->i", aug, aug)) < ZERO_NORM
        todo = todo[bad]
        if not todo.size:
            break
    return out


def augment_vector(x, spec: SyntheticDatasetSpec, address: RngAddress):
    x = as_vector(x)
    return augment_batch(x[None, :], spec, address.seed, [address.item], address.view, address.epoch)[0]


# -------------------------------------------------------------------- audio

@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    n_mels: int = 96
    frame_len: int = 882       # 40 ms at 22.05 kHz
    hop: int = 441             # 50 % overlap
    target_frames: int = 101


@dataclass(frozen=True)
class AugmentationConfig:
    mixback_lambda_max: float = 0.5
    crop_scale_range: tuple = (0.8, 1.0)
    freq_mask_max: int = 8
    time_mask_max: int = 10
    blur_sigma_range: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mixback_lambda_max < 1:
            raise ValueError("mixback_lambda_max must lie in [0, 1)")
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        if self.freq_mask_max < 0 or self.time_mask_max < 0:
            raise ValueError("mask widths must be >= 0")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ValueError("blur_sigma_range must satisfy 0 <= lo <= hi")


@dataclass
class TFPatch:
    grid: np.ndarray       # mel bands x frames, log magnitude
    source_id: str = ""

    @property
    def shape(self):
        return self.grid.shape

    def with_grid(self, grid):
        return TFPatch(grid, self.source_id)


def read_wav(path):
    """Samples as float64 in [-1, 1) and the sample rate. 16-bit PCM only."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise DataError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if width != 2:
        raise DataError(f"{path}: only 16-bit PCM is supported, got {8 * width}-bit")
    if channels not in (1, 2):
        raise DataError(f"{path}: only mono or stereo is supported, got {channels} channels")
    pcm = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    return pcm, rate


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels):
    """HTK-mel triangular filters (n_mels x n_fft//2+1), peak value 1."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_band_centers(sample_rate, n_mels):
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def log_mel(wav, sample_rate, n_mels, frame_len, hop, source_id="") -> TFPatch:
    wav = np.asarray(wav, dtype=np.float64).reshape(-1)
    if min(sample_rate, n_mels, frame_len, hop) <= 0:
        raise ValueError("sample_rate, n_mels, frame_len and hop must be positive")
    if wav.shape[0] < frame_len:
        raise TooShort(f"{wav.shape[0]} samples is shorter than one frame ({frame_len})")
    n_frames = 1 + (wav.shape[0] - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(frame_len + 1)[:-1]        # periodic Hann
    mag = np.abs(np.fft.rfft(wav[idx] * window, axis=1))
    bands = mel_filterbank(sample_rate, frame_len, n_mels) @ mag.T
    return TFPatch(np.log(bands + LOG_EPS), source_id)


def crop_pair(patch: TFPatch, target_frames, g: np.random.Generator):
    n_frames = patch.grid.shape[1]
    if n_frames < target_frames:
        raise TooShort(f"patch has {n_frames} frames, crop needs {target_frames}")
    a, b = g.integers(0, n_frames - target_frames + 1, size=2)
    return (patch.with_grid(patch.grid[:, a:a + target_frames].copy()),
            patch.with_grid(patch.grid[:, b:b + target_frames].copy()))


def crop_at(patch: TFPatch, target_frames, offset):
    return patch.with_grid(patch.grid[:, offset:offset + target_frames].copy())


def mix_with_lambda(x: TFPatch, background: TFPatch, lam) -> TFPatch:
    if x.grid.shape != background.grid.shape:
        raise ShapeMismatch(f"patch {x.grid.shape} vs background {background.grid.shape}")
    if lam == 0:
        return x.with_grid(x.grid.copy())
    lin = (1.0 - lam) * np.exp(x.grid) + lam * np.exp(background.grid)
    return x.with_grid(np.log(lin))


def mix_back(x: TFPatch, background: TFPatch, lambda_max, g: np.random.Generator) -> TFPatch:
    """Linear-magnitude mix with a background patch, weight lambda ~ U(0, lambda_max)."""
    if not 0 <= lambda_max < 1:
        raise ValueError("lambda_max must lie in [0, 1)")
    return mix_with_lambda(x, background, g.uniform(0.0, lambda_max))


def spec_masks(patch: TFPatch, cfg: AugmentationConfig, g: np.random.Generator) -> TFPatch:
    """One frequency mask and one time mask, each of uniform width, set to zero."""
    grid = patch.grid.copy()
    n_bands, n_frames = grid.shape
    f = int(g.integers(0, min(cfg.freq_mask_max, n_bands) + 1))
    f0 = int(g.integers(0, n_bands - f + 1))
    t = int(g.integers(0, min(cfg.time_mask_max, n_frames) + 1))
    t0 = int(g.integers(0, n_frames - t + 1))
    grid[f0:f0 + f, :] = 0.0
    grid[:, t0:t0 + t] = 0.0
    return patch.with_grid(grid)


def bilinear_resize(grid, shape):
    """Corner-aligned bilinear resize; exact when the shape is unchanged."""
    h, w = grid.shape
    oh, ow = shape
    ys = np.arange(oh) * ((h - 1) / (oh - 1)) if oh > 1 else np.zeros(1)
    xs = np.arange(ow) * ((w - 1) / (ow - 1)) if ow > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def random_resized_crop(patch: TFPatch, cfg: AugmentationConfig, g: np.random.Generator) -> TFPatch:
    """Crop a random region covering an area fraction in ``crop_scale_range``
    (aspect ratio kept) and resize it back to the patch shape."""
    h, w = patch.grid.shape
    lo, hi = cfg.crop_scale_range
    for _ in range(MAX_RESAMPLE):
        side = math.sqrt(g.uniform(lo, hi)) if hi > lo else math.sqrt(lo)
        ch, cw = min(h, int(round(h * side))), min(w, int(round(w * side)))
        if ch < 1 or cw < 1:
            continue
        y = int(g.integers(0, h - ch + 1))
        x = int(g.integers(0, w - cw + 1))
        crop = patch.grid[y:y + ch, x:x + cw]
        if crop.shape == (h, w):
            return patch.with_grid(crop.copy())
        return patch.with_grid(bilinear_resize(crop, (h, w)))
    return patch.with_grid(patch.grid.copy())


def gaussian_kernel(sigma):
    if sigma <= 0:
        return np.ones(1)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def blur_with_sigma(patch: TFPatch, sigma) -> TFPatch:
    k = gaussian_kernel(sigma)
    if k.size == 1:
        return patch.with_grid(patch.grid.copy())
    grid = ndimage.correlate1d(patch.grid, k, axis=0, mode="reflect")
    grid = ndimage.correlate1d(grid, k, axis=1, mode="reflect")
    return patch.with_grid(grid)


def gaussian_blur(patch: TFPatch, cfg: AugmentationConfig, g: np.random.Generator) -> TFPatch:
    """Separable Gaussian blur (normalized, truncated at 3 sigma, reflect padding)."""
    lo, hi = cfg.blur_sigma_range
    return blur_with_sigma(patch, g.uniform(lo, hi) if hi > lo else lo)


@dataclass
class AudioCorpus:
    clips: list                # full-length TFPatch per clip
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    def subset(self, idx):
        return AudioCorpus([self.clips[i] for i in idx], self.labels[idx], self.class_names)


def load_wav_corpus(root, audio: AudioConfig) -> AudioCorpus:
    """Directory-per-class WAV corpus; WAVs directly under ``root`` get label 0.

    Clips shorter than ``target_frames`` are tiled along time to fit.
    """
    if not os.path.isdir(root):
        raise DataError(f"audio corpus {root} is not a directory")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    entries = [(os.path.join(root, f), 0) for f in sorted(os.listdir(root)) if f.lower().endswith(".wav")]
    for label, name in enumerate(classes):
        folder = os.path.join(root, name)
        entries += [(os.path.join(folder, f), label) for f in sorted(os.listdir(folder))
                    if f.lower().endswith(".wav")]
    if not entries:
        raise DataError(f"no .wav files found under {root}")
    clips, labels = [], []
    for path, label in entries:
        samples, rate = read_wav(path)
        if rate != audio.sample_rate:
            raise DataError(f"{path}: sample rate {rate} Hz, expected {audio.sample_rate} Hz")
        if samples.shape[0] < audio.frame_len:
            samples = np.resize(samples, audio.frame_len)
        patch = log_mel(samples, rate, audio.n_mels, audio.frame_len, audio.hop, source_id=path)
        if patch.grid.shape[1] < audio.target_frames:
            reps = -(-audio.target_frames // patch.grid.shape[1])
            patch = patch.with_grid(np.tile(patch.grid, (1, reps)))
        clips.append(patch)
        labels.append(label)
    return AudioCorpus(clips, np.array(labels, dtype=np.int64), classes or ["0"])


def audio_views(corpus: AudioCorpus, items, seed, epoch, target_frames, cfg: AugmentationConfig):
    """Two augmented, flattened views per item, shape (len(items), bands*frames) each."""
    v0, v1 = [], []
    for item in items:
        item = int(item)
        g = rngmod.stream(seed, rngmod.AUGMENT, epoch, item)
        x_i, x_j = crop_pair(corpus.clips[item], target_frames, g)
        out = []
        for view, x in enumerate((x_i, x_j)):
            gv = rngmod.stream(seed, rngmod.AUGMENT, epoch, item, view + 1)
            bg_clip = corpus.clips[int(gv.integers(0, len(corpus)))]
            bg = crop_at(bg_clip, target_frames, int(gv.integers(0, bg_clip.grid.shape[1] - target_frames + 1)))
            x = mix_back(x, bg, cfg.mixback_lambda_max, gv)
            x = random_resized_crop(x, cfg, gv)
            x = spec_masks(x, cfg, gv)
            x = gaussian_blur(x, cfg, gv)
            out.append(x.grid.reshape(-1))
        v0.append(out[0])
        v1.append(out[1])
    return np.array(v0), np.array(v1)


def audio_features(corpus: AudioCorpus, target_frames):
    """Unaugmented centre crops, flattened: the evaluation view of each clip."""
    rows = []
    for clip in corpus.clips:
        off = (clip.grid.shape[1] - target_frames) // 2
        rows.append(clip.grid[:, off:off + target_frames].reshape(-1))
    return np.array(rows)
