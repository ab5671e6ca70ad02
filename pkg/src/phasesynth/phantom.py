"""Synthetic contrast-dynamics phantom dataset.

Each case pairs a non-contrast image and tumor mask with three
contrast-phase images whose in-lesion enhancement follows a
class-dependent intensity-time curve: malignant lesions wash in fast and
wash out by the delayed phase (gamma-variate profile), benign lesions
fill progressively. Lesion baseline intensity ranges are disjoint per
class, so both the dynamic signature (in the phase images) and a static
cue (in the non-contrast image) carry the label.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, GenerationError
from .tensorio import load_tensor, save_pgm, save_tensor

PHASE_NAMES = ("art", "pv", "delay")
# nominal normalized acquisition times: 30 s / 75 s / 300 s over the
# delayed-phase time; per-case times are drawn around these (sample_times)
DEFAULT_TIMES = (0.1, 0.25, 1.0)
PARENCHYMA_RATE = 0.25

CASE_FILES = ("ncmri.t", "mask.t", "phase_art.t", "phase_pv.t", "phase_delay.t")


@dataclass
class LesionSpec:
    center: tuple  # (row, col) pixels
    radii: tuple  # (r_row, r_col) pixels
    class_label: int  # 0 benign, 1 malignant
    base_intensity: float
    amplitude: float
    noise_sigma: float = 0.0

    def validate(self, image_size):
        r, c = self.center
        rr, rc = self.radii
        if rr <= 0 or rc <= 0:
            raise GenerationError("lesion radii must be positive")
        if not (r - rr >= 2 and c - rc >= 2 and r + rr <= image_size - 3 and c + rc <= image_size - 3):
            raise GenerationError("lesion ellipse must lie inside the image with a 2-pixel margin")
        if self.class_label not in (0, 1):
            raise GenerationError("class_label must be 0 (benign) or 1 (malignant)")
        if not 0.0 <= self.base_intensity <= 1.0:
            raise GenerationError("base_intensity outside [0,1]")
        if not 0.0 <= self.amplitude <= 1.0:
            raise GenerationError("amplitude outside [0,1]")
        if self.base_intensity + self.amplitude > 1.0:
            raise GenerationError("base_intensity + amplitude exceeds 1")
        if not 0.0 <= self.noise_sigma <= 0.05:
            raise GenerationError("noise_sigma outside [0, 0.05]")


@dataclass
class CaseRecord:
    ncmri: np.ndarray
    tumor_mask: np.ndarray
    phases: list  # [art, pv, delay]
    times: tuple
    class_label: int
    seed: int


@dataclass
class PhantomConfig:
    image_size: int = 64
    case_count: int = 200
    class_balance: float = 0.5  # malignant fraction
    times: tuple = DEFAULT_TIMES
    benign_intensity: tuple = (0.25, 0.40)
    malignant_intensity: tuple = (0.55, 0.70)
    amplitude: tuple = (0.20, 0.30)
    radius: tuple = (6.0, 12.0)
    background: tuple = (0.35, 0.55)
    noise_sigma: float = 0.01
    time_jitter: float = 1.0  # 0 = every case at the nominal times
    master_seed: int = 42
    split_fractions: tuple = (0.70, 0.15, 0.15)

    def validate(self):
        if self.case_count < 2:
            raise GenerationError("case_count must be at least 2")
        if not 0.0 < self.class_balance < 1.0:
            raise GenerationError("class_balance must lie in (0,1)")
        if self.image_size < 16:
            raise GenerationError("image_size too small")
        if not 0.0 <= self.time_jitter <= 1.0:
            raise GenerationError("time_jitter outside [0,1]")

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.times = tuple(cfg.times)
        return cfg


def enhancement_curve(class_label, t, peak_time=DEFAULT_TIMES[0]):
    """Intensity multiplier E(t) in [0,1] for the lesion interior."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"normalized time {t} outside [0,1]")
    if class_label == 1:
        # gamma-variate wash-in/washout, peak normalized to 1 at peak_time
        if t == 0.0:
            return 0.0
        x = t / peak_time
        return x * math.exp(1.0 - x)
    return 1.0 - math.exp(-3.0 * t)


def sample_times(base, jitter, rng):
    """Per-case acquisition times in disjoint windows around nominal ones.

    Each time moves at most 40% of the gap toward its neighbor (0 and 1
    at the ends), scaled by ``jitter``, so the sampled times stay
    strictly increasing in (0,1] for any strictly increasing base.
    """
    base = tuple(base)
    if not all(0.0 < t <= 1.0 for t in base) or list(base) != sorted(set(base)):
        raise GenerationError("times must be strictly increasing in (0,1]")
    if jitter == 0.0:
        return base
    bounds = (0.0,) + base + (1.0,)
    times = []
    for i, t in enumerate(base):
        down = 0.4 * jitter * (t - bounds[i])
        up = 0.4 * jitter * (bounds[i + 2] - t)
        times.append(rng.uniform(t - down, t + up))
    return tuple(times)


def _smooth_field(rng, size, lo, hi, coarse=8):
    """Low-frequency random field: bilinear upsample of a coarse grid."""
    grid = rng.uniform(lo, hi, size=(coarse, coarse))
    src = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    frac = src - i0
    rows = grid[i0][:, i0] * np.outer(1 - frac, 1 - frac) \
        + grid[i0][:, i1] * np.outer(1 - frac, frac) \
        + grid[i1][:, i0] * np.outer(frac, 1 - frac) \
        + grid[i1][:, i1] * np.outer(frac, frac)
    return rows


def _ellipse_mask(size, center, radii):
    r = np.arange(size)
    rr, cc = np.meshgrid(r, r, indexing="ij")
    return (((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2) <= 1.0


def generate_case(spec, times, seed, image_size=64, background=(0.35, 0.55)):
    spec.validate(image_size)
    times = tuple(times)
    if not all(0.0 < t <= 1.0 for t in times) or list(times) != sorted(set(times)):
        raise GenerationError("times must be strictly increasing in (0,1]")
    rng = np.random.default_rng(seed)
    mask = _ellipse_mask(image_size, spec.center, spec.radii)
    ncmri = _smooth_field(rng, image_size, background[0], background[1])
    ncmri[mask] = spec.base_intensity
    ncmri = np.clip(ncmri, 0.0, 1.0)

    peak = times[0]
    phases = []
    for t in times:
        img = ncmri.copy()
        img[mask] += spec.amplitude * enhancement_curve(spec.class_label, t, peak_time=peak)
        img[~mask] += PARENCHYMA_RATE * t
        if spec.noise_sigma > 0:
            img += rng.normal(0.0, spec.noise_sigma, img.shape)
        phases.append(np.clip(img, 0.0, 1.0))
    return CaseRecord(
        ncmri=ncmri,
        tumor_mask=mask.astype(np.float64),
        phases=phases,
        times=times,
        class_label=spec.class_label,
        seed=seed,
    )


def _draw_spec(cfg, class_label, rng):
    lo, hi = cfg.radius
    radii = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    margin = max(radii) + 3.0
    center = (
        rng.uniform(margin, cfg.image_size - 1 - margin),
        rng.uniform(margin, cfg.image_size - 1 - margin),
    )
    intensity = cfg.malignant_intensity if class_label == 1 else cfg.benign_intensity
    return LesionSpec(
        center=center,
        radii=radii,
        class_label=class_label,
        base_intensity=rng.uniform(*intensity),
        amplitude=rng.uniform(*cfg.amplitude),
        noise_sigma=cfg.noise_sigma,
    )


def assign_splits(case_count, fractions, rng):
    n_train = int(case_count * fractions[0])
    n_val = int(case_count * fractions[1])
    order = rng.permutation(case_count)
    splits = [""] * case_count
    for pos, idx in enumerate(order):
        if pos < n_train:
            splits[idx] = "train"
        elif pos < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def _write_case(cfg, out_dir, index, label):
    """Generate and persist one case; pure given (cfg, index, label)."""
    seed = cfg.master_seed + index
    rng = np.random.default_rng(seed)
    spec = _draw_spec(cfg, label, rng)
    times = sample_times(cfg.times, cfg.time_jitter, rng)
    case = generate_case(spec, times, seed, cfg.image_size, cfg.background)
    case_id = f"case_{index:04d}"
    case_dir = os.path.join(out_dir, case_id)
    os.makedirs(case_dir, exist_ok=True)
    save_tensor(os.path.join(case_dir, "ncmri.t"), case.ncmri)
    save_tensor(os.path.join(case_dir, "mask.t"), case.tumor_mask)
    for name, img in zip(PHASE_NAMES, case.phases):
        save_tensor(os.path.join(case_dir, f"phase_{name}.t"), img)
    with open(os.path.join(case_dir, "meta.json"), "w") as f:
        json.dump({"label": label, "times": list(times), "seed": seed}, f, sort_keys=True)
    return case_id


def generate_dataset(cfg, out_dir, workers=1):
    """Write cases and a manifest; fully determined by cfg.master_seed.

    Cases are independent given their per-case seeds, so they may be
    written by up to ``workers`` threads; the manifest is assembled
    sequentially either way.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    n_mal = int(round(cfg.case_count * cfg.class_balance))
    labels = [1] * n_mal + [0] * (cfg.case_count - n_mal)
    split_rng = np.random.default_rng(cfg.master_seed)
    splits = assign_splits(cfg.case_count, cfg.split_fractions, split_rng)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ids = list(pool.map(lambda i: _write_case(cfg, out_dir, i, labels[i]),
                                range(cfg.case_count)))
    else:
        ids = [_write_case(cfg, out_dir, i, labels[i]) for i in range(cfg.case_count)]

    cases = [
        {"id": ids[i], "label": labels[i], "seed": cfg.master_seed + i,
         "split": splits[i], "path": ids[i]}
        for i in range(cfg.case_count)
    ]

    manifest = {
        "schema_version": 1,
        "config": _config_echo(cfg),
        "cases": cases,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest_path


def _config_echo(cfg):
    echo = asdict(cfg)
    for k, v in echo.items():
        if isinstance(v, tuple):
            echo[k] = list(v)
    return echo


def load_manifest(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as f:
        return json.load(f)


def load_case(data_dir, entry):
    case_dir = os.path.join(data_dir, entry["path"])
    with open(os.path.join(case_dir, "meta.json")) as f:
        meta = json.load(f)
    return CaseRecord(
        ncmri=load_tensor(os.path.join(case_dir, "ncmri.t")),
        tumor_mask=load_tensor(os.path.join(case_dir, "mask.t")),
        phases=[load_tensor(os.path.join(case_dir, f"phase_{n}.t")) for n in PHASE_NAMES],
        times=tuple(meta["times"]),
        class_label=int(meta["label"]),
        seed=int(meta["seed"]),
    )


def export_case_pgm(case, out_dir, stem="case"):
    os.makedirs(out_dir, exist_ok=True)
    save_pgm(os.path.join(out_dir, f"{stem}_ncmri.pgm"), case.ncmri)
    save_pgm(os.path.join(out_dir, f"{stem}_mask.pgm"), case.tumor_mask)
    for name, img in zip(PHASE_NAMES, case.phases):
        save_pgm(os.path.join(out_dir, f"{stem}_phase_{name}.pgm"), img)
