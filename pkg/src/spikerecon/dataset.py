"""Spike recordings, stimulus movies, binning, PSTHs, and synthetic generators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySelectionError, ParseError, ShapeError, ValidationError

REGION_CODES = ("VISp", "VISl", "VISpm", "VISam", "VISal", "VISrl")

# "VISI" (capital i) appears in some sources for the lateral area; accept it
# as an alias for "VISl" but warn rather than silently rewriting.
_REGION_ALIASES = {"VISI": "VISl"}


def validate_region(code: str, context: str = "") -> str:
    if code in _REGION_ALIASES:
        canonical = _REGION_ALIASES[code]
        warnings.warn(f"region code {code!r} treated as alias for {canonical!r}{context}")
        return canonical
    if code not in REGION_CODES:
        raise ValidationError(f"unknown region code {code!r}{context}")
    return code


@dataclass
class UnitRecord:
    unit_id: str
    region: str
    spike_times: np.ndarray  # sorted, non-negative seconds

    def __post_init__(self):
        self.spike_times = np.asarray(self.spike_times, dtype=np.float64)
        if self.spike_times.size and (np.any(np.diff(self.spike_times) < 0)
                                      or not np.all(np.isfinite(self.spike_times))):
            raise ValidationError(f"unit {self.unit_id}: spike times must be sorted and finite")


@dataclass
class SessionRecording:
    session_id: str
    units: list[UnitRecord]

    def __post_init__(self):
        if not self.session_id:
            raise ValidationError("session_id must be non-empty")
        ids = [u.unit_id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate unit ids in session {self.session_id}")


@dataclass
class StimulusMovie:
    frame_onsets: np.ndarray  # seconds, strictly increasing
    frames: np.ndarray        # F×H×W×C in [0,1]
    frame_labels: np.ndarray | None = None

    def __post_init__(self):
        self.frame_onsets = np.asarray(self.frame_onsets, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ShapeError("frames must be F×H×W×C with F >= 1")
        if self.frame_onsets.shape[0] != self.frames.shape[0]:
            raise ShapeError("frame_onsets length must equal frame count")
        if self.frame_onsets.size > 1 and np.any(np.diff(self.frame_onsets) <= 0):
            raise ValidationError("frame onsets must be strictly increasing")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise ValidationError("frame intensities must lie in [0,1]")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass
class ResponseMatrix:
    values: np.ndarray     # F×U mean spikes per frame
    unit_ids: list[str]
    regions: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("response values must be 2-D (frames × units)")
        if self.values.shape[1] != len(self.unit_ids) or len(self.unit_ids) != len(self.regions):
            raise ShapeError("unit_ids/regions length must match column count")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise ValidationError("response values must be finite and non-negative")

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]


@dataclass
class Psth:
    region: str
    bin_edges: np.ndarray  # seconds relative to onset, length B+1
    counts: np.ndarray     # mean spikes per bin per trial per unit, length B

    def __post_init__(self):
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ShapeError("counts length must be len(bin_edges) - 1")


@dataclass
class EncodingModelConfig:
    """Linear-nonlinear-Poisson generator settings for synthetic recordings.

    Per unit: rate(frame) = base_rate + gain[region] * softplus(w . feat(frame)),
    with per-unit filters w drawn from `seed` at scale `filter_scale` over the
    4x4 block-mean feature of each frame.
    """
    base_rate: float = 5.0
    region_information: dict = field(default_factory=lambda: {r: 1.0 for r in REGION_CODES})
    filter_scale: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.base_rate < 0:
            raise ValidationError("base_rate must be >= 0")
        for r, g in self.region_information.items():
            validate_region(r)
            if not 0.0 <= g <= 1.0:
                raise ValidationError(f"informativeness gain for {r} must be in [0,1]")


# ---------------------------------------------------------------------------
# loading


def load_spike_file(path) -> SessionRecording:
    """Parse a spike CSV (session_id,unit_id,region,spike_time_s) into one session."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "session_id,unit_id,region,spike_time_s":
        raise ParseError(f"{path}: line 1: expected header "
                         "'session_id,unit_id,region,spike_time_s'")
    session_ids = set()
    times: dict[str, list[float]] = {}
    regions: dict[str, str] = {}
    order: list[str] = []
    for ln, row in enumerate(lines[1:], start=2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path}: line {ln}: expected 4 fields, got {len(parts)}")
        sid, uid, region, t_str = (p.strip() for p in parts)
        try:
            t = float(t_str)
        except ValueError:
            raise ParseError(f"{path}: line {ln}: bad spike time {t_str!r}") from None
        if t < 0 or not np.isfinite(t):
            raise ParseError(f"{path}: line {ln}: spike time must be finite and >= 0")
        region = validate_region(region, context=f" ({path}: line {ln})")
        session_ids.add(sid)
        if uid not in times:
            times[uid] = []
            regions[uid] = region
            order.append(uid)
        elif regions[uid] != region:
            raise ValidationError(f"{path}: line {ln}: unit {uid} has conflicting regions")
        times[uid].append(t)
    if len(session_ids) > 1:
        raise ValidationError(f"{path}: multiple session ids {sorted(session_ids)}")
    sid = session_ids.pop() if session_ids else Path(path).stem
    units = [UnitRecord(uid, regions[uid], np.sort(times[uid])) for uid in order]
    return SessionRecording(sid, units)


def write_spike_file(path, rec: SessionRecording):
    with open(path, "w", encoding="utf-8") as f:
        f.write("session_id,unit_id,region,spike_time_s\n")
        for u in rec.units:
            for t in u.spike_times:
                f.write(f"{rec.session_id},{u.unit_id},{u.region},{t:.6f}\n")


# ---------------------------------------------------------------------------
# binning and aggregation


def frame_edges(movie: StimulusMovie, latency_offset: float = 0.0) -> np.ndarray:
    """Per-frame half-open interval edges, shifted by the response latency.

    The final frame's right edge is the last onset plus the median
    inter-frame interval (single-frame movies use 1 s).
    """
    onsets = movie.frame_onsets
    ifi = float(np.median(np.diff(onsets))) if onsets.size > 1 else 1.0
    return np.concatenate([onsets, [onsets[-1] + ifi]]) + latency_offset


def bin_spikes(rec: SessionRecording, movie: StimulusMovie,
               latency_offset: float = 0.03) -> ResponseMatrix:
    """Count each unit's spikes inside every frame's half-open interval."""
    if latency_offset < 0:
        raise ValidationError("latency_offset must be >= 0")
    edges = frame_edges(movie, latency_offset)
    F = movie.frame_count
    values = np.zeros((F, len(rec.units)))
    for j, unit in enumerate(rec.units):
        idx = np.searchsorted(edges, unit.spike_times, side="right") - 1
        idx = idx[(idx >= 0) & (idx < F)]
        np.add.at(values[:, j], idx, 1.0)
    return ResponseMatrix(values, [u.unit_id for u in rec.units],
                          [u.region for u in rec.units])


def aggregate_sessions(mats: list[ResponseMatrix]) -> ResponseMatrix:
    """Drop silent units per session, then concatenate unit columns."""
    if not mats:
        raise ValidationError("need at least one session matrix")
    F = mats[0].frame_count
    vals, ids, regs = [], [], []
    for m in mats:
        if m.frame_count != F:
            raise ShapeError(f"frame count mismatch: {m.frame_count} != {F}")
        keep = np.any(m.values != 0, axis=0)
        vals.append(m.values[:, keep])
        ids.extend([u for u, k in zip(m.unit_ids, keep) if k])
        regs.extend([r for r, k in zip(m.regions, keep) if k])
    return ResponseMatrix(np.hstack(vals), ids, regs)


def filter_by_region(mat: ResponseMatrix, keep) -> ResponseMatrix:
    """Keep only unit columns whose region is in `keep`, preserving order."""
    keep = set(keep)
    if not keep:
        raise ValidationError("keep set must be non-empty")
    for r in keep:
        validate_region(r)
    mask = np.array([r in keep for r in mat.regions])
    if not mask.any():
        raise EmptySelectionError(f"no units in regions {sorted(keep)}")
    return ResponseMatrix(mat.values[:, mask],
                          [u for u, k in zip(mat.unit_ids, mask) if k],
                          [r for r, k in zip(mat.regions, mask) if k])


def psth(rec: SessionRecording, region: str, trial_onsets, window,
         bin_width: float) -> Psth:
    """Mean spike count per peristimulus bin, averaged over trials and units."""
    region = validate_region(region)
    t_lo, t_hi = window
    if not t_lo < t_hi:
        raise ValidationError("window must satisfy t_lo < t_hi")
    n_bins_f = (t_hi - t_lo) / bin_width
    n_bins = int(round(n_bins_f))
    if abs(n_bins_f - n_bins) > 1e-9 or n_bins < 1:
        raise ValidationError("bin_width must divide the window length")
    trial_onsets = np.asarray(trial_onsets, dtype=np.float64)
    if trial_onsets.size < 1:
        raise ValidationError("need at least one trial onset")
    units = [u for u in rec.units if u.region == region]
    if not units:
        raise EmptySelectionError(f"no units in region {region}")
    counts = np.zeros(n_bins)
    for u in units:
        for onset in trial_onsets:
            rel = u.spike_times - (onset + t_lo)
            idx = np.floor(rel / bin_width).astype(int)
            idx = idx[(rel >= 0) & (idx >= 0) & (idx < n_bins)]
            np.add.at(counts, idx, 1.0)
    counts /= len(units) * trial_onsets.size
    edges = t_lo + bin_width * np.arange(n_bins + 1)
    return Psth(region, edges, counts)


def write_psth_csv(p: Psth, path):
    with open(path, "w") as f:
        f.write("bin_lo_s,bin_hi_s,mean_count\n")
        for lo, hi, c in zip(p.bin_edges[:-1], p.bin_edges[1:], p.counts):
            f.write(f"{lo:.6f},{hi:.6f},{c:.10g}\n")


# ---------------------------------------------------------------------------
# synthetic generators


def _render_template(cls: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered grayscale scene for a class template."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H * (0.5 + 0.2 * (rng.random() - 0.5))
    cx = W * (0.5 + 0.2 * (rng.random() - 0.5))
    scale = 0.28 + 0.10 * rng.random()
    lum = 0.75 + 0.25 * rng.random()
    bg = 0.08 + 0.08 * rng.random()
    img = np.full((H, W), bg)
    r = scale * min(H, W)
    kind = cls % 6
    if kind == 0:  # disk
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = lum
    elif kind == 1:  # square frame
        box = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        inner = (np.abs(yy - cy) <= 0.45 * r) & (np.abs(xx - cx) <= 0.45 * r)
        img[box & ~inner] = lum
    elif kind == 2:  # horizontal stripes
        period = max(3.0, r / 1.5)
        img[np.sin(2 * np.pi * (yy - cy) / period) > 0.2] = lum
    elif kind == 3:  # cross
        arm = max(1.5, 0.3 * r)
        img[(np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)] = lum
        img[(np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)] = lum
    elif kind == 4:  # checkerboard
        period = max(3.0, r / 1.2)
        img[np.logical_xor(np.sin(2 * np.pi * yy / period) > 0,
                           np.sin(2 * np.pi * xx / period) > 0)] = lum
    else:  # diagonal ramp with a dark disk
        img = bg + (lum - bg) * ((yy + xx) / (H + W))
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= (0.6 * r) ** 2] = bg
    return np.clip(img, 0.0, 1.0)


def synth_movie(F: int, H: int = 32, W: int = 32, C: int = 1, n_classes: int = 4,
                seed: int = 0, frame_period_s: float = 0.25) -> StimulusMovie:
    """Procedural labeled stimulus movie; balanced classes, deterministic per seed."""
    if F < 1 or H < 1 or W < 1:
        raise ValidationError("F, H, W must be >= 1")
    if n_classes < 2:
        raise ValidationError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(F) % n_classes)
    frames = np.empty((F, H, W, C))
    for i, cls in enumerate(labels):
        img = _render_template(int(cls), H, W, rng)
        frames[i] = np.repeat(img[:, :, None], C, axis=2)
    onsets = frame_period_s * np.arange(F)
    return StimulusMovie(onsets, frames, labels)


def frame_features(movie: StimulusMovie, grid: int = 4) -> np.ndarray:
    """Coarse F×(grid²) features: centered block means of each frame."""
    F, H, W, _ = movie.frames.shape
    gray = movie.frames.mean(axis=3)
    ys = np.array_split(np.arange(H), grid)
    xs = np.array_split(np.arange(W), grid)
    feats = np.empty((F, grid * grid))
    k = 0
    for yb in ys:
        for xb in xs:
            feats[:, k] = gray[:, yb][:, :, xb].mean(axis=(1, 2))
            k += 1
    return feats - 0.5


def synth_spikes(movie: StimulusMovie, cfg: EncodingModelConfig,
                 n_units_per_region: int = 10, duration_per_frame: float | None = None,
                 session_id: str = "synth") -> SessionRecording:
    """Generate an LNP session: per-unit stimulus-driven Poisson spikes.

    Units in regions with zero informativeness gain fire at the base rate
    only, so their responses carry no stimulus information.
    """
    if n_units_per_region < 1:
        raise ValidationError("n_units_per_region must be >= 1")
    onsets = movie.frame_onsets
    if duration_per_frame is None:
        duration_per_frame = float(np.median(np.diff(onsets))) if onsets.size > 1 else 1.0
    rng = np.random.default_rng(cfg.seed)
    feats = frame_features(movie)
    units = []
    for region in REGION_CODES:
        gain = cfg.region_information.get(region, 0.0)
        for k in range(n_units_per_region):
            w = rng.normal(0.0, cfg.filter_scale, feats.shape[1])
            drive = np.logaddexp(0.0, feats @ w)  # softplus
            rates = cfg.base_rate + gain * drive
            spikes = []
            for f, onset in enumerate(onsets):
                n = rng.poisson(rates[f] * duration_per_frame)
                if n:
                    spikes.append(onset + duration_per_frame * np.sort(rng.random(n)))
            times = np.concatenate(spikes) if spikes else np.empty(0)
            units.append(UnitRecord(f"{region}_{k:03d}", region, times))
    return SessionRecording(session_id, units)
