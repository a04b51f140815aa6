"""Parametric toy generator for b-jet vs light-jet events, and the dataset file format.

Each event is built in a frame where the jet axis is z: track directions,
secondary-vertex positions and impact-parameter smearing all have uniformly
random azimuth about that axis, so the sample is axially symmetric about the
jet axis by construction.  Signal events route some tracks through a vertex
displaced along (roughly) the jet axis by an exponential flight length.

Units: momenta in GeV, positions in mm.

Binary format (all little-endian)::

    offset  size  field
    0       8     magic  b"BTNJETS\\0"
    8       4     uint32 format version (1)
    12      4     uint32 track slots per record (30)
    16      8     uint64 record count N
    24      ...   N fixed-width records:
                    uint8   label
                    uint8   n_tracks
                    float64 jet_p[3]
                    float64 p[30][3]      (zero beyond n_tracks)
                    float64 a[30][3]
                    int8    q[30]
                    uint8   ptype[30]     (0 electron, 1 muon, 2 hadron)
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .geometry import axis_frame

MAX_TRACKS = 30
MAGIC = b"BTNJETS\x00"
FORMAT_VERSION = 1
HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("slots", "<u4"), ("count", "<u8")])
RECORD = np.dtype([
    ("label", "u1"), ("ntrk", "u1"), ("jet_p", "<f8", (3,)),
    ("p", "<f8", (MAX_TRACKS, 3)), ("a", "<f8", (MAX_TRACKS, 3)),
    ("q", "i1", (MAX_TRACKS,)), ("ptype", "u1", (MAX_TRACKS,)),
])

ELECTRON, MUON, HADRON = 0, 1, 2
PTYPE_NAMES = ("electron", "muon", "hadron")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Track:
    p: np.ndarray
    a: np.ndarray
    q: int
    ptype: int


@dataclass
class JetEvent:
    jet_p: np.ndarray
    tracks: list[Track]
    label: int

    @property
    def jhat(self) -> np.ndarray:
        return self.jet_p / np.linalg.norm(self.jet_p)


@dataclass
class GenConfig:
    """Toy-generator knobs.  Type frequencies and scales are toy values, not physics."""

    signal_fraction: float = 0.5
    mean_tracks: float = 12.0
    pt_min: float = 90.0
    pt_max: float = 500.0
    eta_max: float = 2.5
    charged_fraction: float = 0.6      # share of jet momentum carried by tracks
    track_cone: float = 0.08           # rad, spread of track directions about the jet axis
    flight_scale: float = 1.0          # mm, mean B flight length
    b_dir_spread: float = 0.02         # rad, B direction about the jet axis
    sv_tracks_mean: float = 4.0        # mean tracks from the displaced vertex
    sv_spread: float = 0.4             # rad, daughter directions about the B direction
    ip_smear: float = 0.01             # mm, per-component impact-point smearing
    ip_smear_ms: float = 0.05          # mm GeV, extra smearing ip_smear_ms / |p| added in quadrature
    type_probs: tuple = (0.08, 0.07, 0.85)   # electron, muon, hadron
    seed: int = 0

    def __post_init__(self):
        for name in ("mean_tracks", "pt_min", "pt_max", "charged_fraction", "sv_tracks_mean"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("track_cone", "flight_scale", "b_dir_spread", "sv_spread", "ip_smear", "ip_smear_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ValueError("signal_fraction must lie in [0, 1]")
        if self.pt_max < self.pt_min:
            raise ValueError("pt_max < pt_min")
        self.type_probs = tuple(float(x) for x in self.type_probs)
        if len(self.type_probs) != 3 or abs(sum(self.type_probs) - 1.0) > 1e-9:
            raise ValueError("type_probs must be three probabilities summing to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator option(s): {sorted(unknown)}")
        return cls(**d)


def event_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent substream for (seed, split stream, event index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def _directions_about(axis: np.ndarray, spread: float, n: int, rng) -> np.ndarray:
    """Unit vectors at Rayleigh(spread) polar angle and uniform azimuth about ``axis``."""
    theta = rng.rayleigh(spread, n) if spread > 0 else np.zeros(n)
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    local = np.stack([np.sin(theta) * np.cos(az), np.sin(theta) * np.sin(az), np.cos(theta)], axis=-1)
    return local @ axis_frame(axis)


def closest_approach(origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Point on the line origin + t * direction nearest to the coordinate origin."""
    d = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
    a = origin - np.sum(origin * d, axis=-1, keepdims=True) * d
    # one projection pass leaves a.d at rounding level of |origin|; a second removes it
    return a - np.sum(a * d, axis=-1, keepdims=True) * d


def generate_event(cfg: GenConfig, rng: np.random.Generator, label: int | None = None) -> JetEvent:
    if label is None:
        label = int(rng.random() < cfg.signal_fraction)
    pt = np.exp(rng.uniform(np.log(cfg.pt_min), np.log(cfg.pt_max)))
    eta = rng.uniform(-cfg.eta_max, cfg.eta_max)
    phi = rng.uniform(-np.pi, np.pi)
    jet_p = np.array([pt * np.cos(phi), pt * np.sin(phi), pt * np.sinh(eta)])
    jhat = jet_p / np.linalg.norm(jet_p)

    n = int(np.clip(rng.poisson(cfg.mean_tracks), 1, MAX_TRACKS))
    frac = rng.dirichlet(np.ones(n))
    pmag = cfg.charged_fraction * np.linalg.norm(jet_p) * frac
    origin = np.zeros((n, 3))
    dirs = _directions_about(jhat, cfg.track_cone, n, rng)
    if label == 1:
        n_sv = int(min(n, 1 + rng.poisson(cfg.sv_tracks_mean - 1.0)))
        bdir = _directions_about(jhat, cfg.b_dir_spread, 1, rng)[0]
        flight = rng.exponential(cfg.flight_scale) if cfg.flight_scale > 0 else 0.0
        origin[:n_sv] = flight * bdir
        dirs[:n_sv] = _directions_about(bdir, cfg.sv_spread, n_sv, rng)
    sigma = np.hypot(cfg.ip_smear, cfg.ip_smear_ms / pmag)
    if np.any(sigma > 0):
        origin = origin + rng.normal(0.0, 1.0, (n, 3)) * sigma[:, None]
    p = pmag[:, None] * dirs
    a = closest_approach(origin, p)
    order = rng.permutation(n)
    ptype = rng.choice(3, size=n, p=cfg.type_probs)
    q = rng.choice(np.array([-1, 1]), size=n)
    tracks = [Track(p[i], a[i], int(q[i]), int(ptype[i])) for i in order]
    return JetEvent(jet_p, tracks, int(label))


@dataclass
class JetDataset:
    """Columnar storage of padded events; slots beyond ``ntrk`` are all zero."""

    label: np.ndarray
    ntrk: np.ndarray
    jet_p: np.ndarray
    p: np.ndarray
    a: np.ndarray
    q: np.ndarray
    ptype: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.label.shape[0])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(MAX_TRACKS)[None, :] < self.ntrk[:, None]

    @classmethod
    def empty(cls, n: int = 0) -> "JetDataset":
        rec = np.zeros(n, dtype=RECORD)
        return cls.from_records(rec)

    @classmethod
    def from_records(cls, rec: np.ndarray) -> "JetDataset":
        return cls(label=rec["label"].astype(np.int64), ntrk=rec["ntrk"].astype(np.int64),
                   jet_p=rec["jet_p"].copy(), p=rec["p"].copy(), a=rec["a"].copy(),
                   q=rec["q"].astype(np.int64), ptype=rec["ptype"].astype(np.int64))

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=RECORD)
        for name in RECORD.names:
            rec[name] = getattr(self, name)
        return rec

    @classmethod
    def from_events(cls, events: list[JetEvent]) -> "JetDataset":
        rec = np.zeros(len(events), dtype=RECORD)
        for i, ev in enumerate(events):
            n = len(ev.tracks)
            if not 1 <= n <= MAX_TRACKS:
                raise ValueError(f"event {i} has {n} tracks; expected 1..{MAX_TRACKS}")
            rec["label"][i] = ev.label
            rec["ntrk"][i] = n
            rec["jet_p"][i] = ev.jet_p
            rec["p"][i, :n] = [t.p for t in ev.tracks]
            rec["a"][i, :n] = [t.a for t in ev.tracks]
            rec["q"][i, :n] = [t.q for t in ev.tracks]
            rec["ptype"][i, :n] = [t.ptype for t in ev.tracks]
        return cls.from_records(rec)

    def event(self, i: int) -> JetEvent:
        n = int(self.ntrk[i])
        tracks = [Track(self.p[i, k].copy(), self.a[i, k].copy(), int(self.q[i, k]), int(self.ptype[i, k]))
                  for k in range(n)]
        return JetEvent(self.jet_p[i].copy(), tracks, int(self.label[i]))

    def subset(self, idx) -> "JetDataset":
        return JetDataset(*(getattr(self, n)[idx] for n in RECORD.names), meta=dict(self.meta))

    def rotated(self, R: np.ndarray) -> "JetDataset":
        """Apply one global rotation (or one per event, shape (N, 3, 3)) to every vector."""
        R = np.asarray(R)
        if R.ndim == 2:
            R = np.broadcast_to(R, (len(self), 3, 3))
        out = self.subset(slice(None))
        out.jet_p = np.einsum("nij,nj->ni", R, self.jet_p)
        out.p = np.einsum("nij,nkj->nki", R, self.p)
        out.a = np.einsum("nij,nkj->nki", R, self.a)
        return out


def generate_dataset(cfg: GenConfig, n: int, stream: int = 0) -> JetDataset:
    events = [generate_event(cfg, event_rng(cfg.seed, stream, i)) for i in range(n)]
    ds = JetDataset.from_events(events) if events else JetDataset.empty()
    ds.meta = {"gen": asdict(cfg), "stream": stream}
    return ds


# --- file IO ------------------------------------------------------------------------

def write_dataset(path, ds: JetDataset) -> None:
    header = np.zeros(1, dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = FORMAT_VERSION
    header["slots"] = MAX_TRACKS
    header["count"] = len(ds)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(ds.to_records().tobytes())


def read_dataset(path) -> JetDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)} "
                                 f"(need {HEADER.itemsize} bytes)")
    header = np.frombuffer(raw, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC.rstrip(b"\x00"):
        raise DatasetFormatError(f"{path}: bad magic {bytes(header['magic'])!r} at byte offset 0")
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {int(header['version'])}")
    if header["slots"] != MAX_TRACKS:
        raise DatasetFormatError(f"{path}: expected {MAX_TRACKS} track slots, file has {int(header['slots'])}")
    count = int(header["count"])
    expected = HEADER.itemsize + count * RECORD.itemsize
    if len(raw) < expected:
        complete = (len(raw) - HEADER.itemsize) // RECORD.itemsize
        off = HEADER.itemsize + complete * RECORD.itemsize
        raise DatasetFormatError(f"{path}: truncated record {complete} at byte offset {off} "
                                 f"(file is {len(raw)} bytes, header promises {expected})")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: {len(raw) - expected} trailing bytes after byte offset {expected}")
    rec = np.frombuffer(raw, dtype=RECORD, count=count, offset=HEADER.itemsize)
    ds = JetDataset.from_records(rec)
    if count and (ds.ntrk.min() < 1 or ds.ntrk.max() > MAX_TRACKS):
        raise DatasetFormatError(f"{path}: track count outside 1..{MAX_TRACKS}")
    return ds


def export_text(path, ds: JetDataset) -> None:
    """One JSON object per line, for eyeballing."""
    with open(path, "w") as fh:
        for i in range(len(ds)):
            ev = ds.event(i)
            fh.write(json.dumps({
                "label": ev.label,
                "jet_p": ev.jet_p.tolist(),
                "tracks": [{"p": t.p.tolist(), "a": t.a.tolist(), "q": t.q,
                            "ptype": PTYPE_NAMES[t.ptype]} for t in ev.tracks],
            }) + "\n")


# --- symmetry audit ----------------------------------------------------------------

@dataclass
class AuditResult:
    azimuth_statistic: float
    azimuth_pvalue: float
    ip_statistic: float
    ip_pvalue: float

    @property
    def statistic(self) -> float:
        return max(self.azimuth_statistic, self.ip_statistic)


def impact_azimuths(ds: JetDataset) -> np.ndarray:
    """Azimuth of each valid track's impact point about its jet axis."""
    jhat = ds.jet_p / np.linalg.norm(ds.jet_p, axis=1, keepdims=True)
    Q = axis_frame(jhat)
    local = np.einsum("nij,nkj->nki", Q, ds.a)[ds.mask]
    return np.arctan2(local[:, 1], local[:, 0])


def rotate_about_jet_axes(ds: JetDataset, angles: np.ndarray) -> JetDataset:
    jhat = ds.jet_p / np.linalg.norm(ds.jet_p, axis=1, keepdims=True)
    K = np.zeros((len(ds), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -jhat[:, 2], jhat[:, 1], -jhat[:, 0]
    K = K - np.swapaxes(K, 1, 2)
    s, c = np.sin(angles)[:, None, None], np.cos(angles)[:, None, None]
    R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return ds.rotated(R)


def axial_symmetry_audit(ds: JetDataset, n_rot: int, rng: np.random.Generator | None = None) -> AuditResult:
    """Two-sample KS tests of the sample against a copy rotated about each jet axis.

    The copy applies ``n_rot`` successive random rotations about each event's
    axis; ``n_rot=0`` compares the sample with itself.
    """
    rng = rng or np.random.default_rng(0)
    angles = np.zeros(len(ds))
    for _ in range(n_rot):
        angles = angles + rng.uniform(0.0, 2.0 * np.pi, len(ds))
    other = rotate_about_jet_axes(ds, angles) if n_rot else ds
    az = stats.ks_2samp(impact_azimuths(ds), impact_azimuths(other))
    ip = stats.ks_2samp(np.linalg.norm(ds.a[ds.mask], axis=1), np.linalg.norm(other.a[other.mask], axis=1))
    return AuditResult(float(az.statistic), float(az.pvalue), float(ip.statistic), float(ip.pvalue))
