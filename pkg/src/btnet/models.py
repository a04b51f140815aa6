"""PFN baseline and Bilinear Tensor Network assembled from the layer primitives.

Both architectures have the Deep Sets form ``F(sum_k Phi(p_k))``.  The BTN
keeps scalar, vector and tensor channels separate up to an invariant readout,
so its logits are unchanged by any global rotation of the event.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, ParamStore, Tape, Var, const
from .autodiff import ops
from .channels import RepChannels
from .datagen import MAX_TRACKS, JetDataset
from .geometry import axis_frame

MODEL_CLASSES = ("baseline_pfn", "vector", "tensor")
SCALAR_ACTIVATIONS = ("relu", "relu1", "hardtanh")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    model_class: str = "tensor"
    enable_bilinear: bool = True
    enable_so2: bool = True
    latent_dim: int = 64
    hidden_width: int = 128        # dense scalar layers (PFN, BTN head)
    rep_width: int = 128           # 2F: per-representation width of hidden BTN layers
    momentum_scale: float = 100.0  # GeV per unit network input
    impact_scale: float = 1.0      # mm per unit network input
    init_gain: float = math.sqrt(3.0)  # affine weights ~ U(+-gain * sqrt(1 / fan_in))
    scalar_activation: str = "relu1"   # hidden representation layers: relu | relu1 | hardtanh
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model_class not in MODEL_CLASSES:
            raise ConfigError(f"model_class must be one of {MODEL_CLASSES}, got {self.model_class!r}")
        for name in ("latent_dim", "hidden_width", "rep_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.model_class != "baseline_pfn" and self.enable_bilinear and self.rep_width % 2:
            raise ConfigError("bilinear layers need an even rep_width")
        if self.scalar_activation not in SCALAR_ACTIVATIONS:
            raise ConfigError(f"scalar_activation must be one of {SCALAR_ACTIVATIONS}")
        if not (self.momentum_scale > 0 and self.impact_scale > 0 and self.init_gain > 0):
            raise ConfigError("input scales must be positive")

    @property
    def is_pfn(self) -> bool:
        return self.model_class == "baseline_pfn"

    @property
    def has_tensors(self) -> bool:
        return self.model_class == "tensor"

    @property
    def label(self) -> str:
        if self.is_pfn:
            return "baseline"
        parts = [self.model_class]
        if self.enable_bilinear:
            parts.append("BiL")
        if self.enable_so2:
            parts.append("SO2")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
        return cls(**d)


# --- inputs ------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded events as arrays; ``mask`` marks real tracks."""

    jet_p: np.ndarray   # (B, 3)
    p: np.ndarray       # (B, P, 3)
    a: np.ndarray       # (B, P, 3)
    q: np.ndarray       # (B, P)
    ptype: np.ndarray   # (B, P)
    mask: np.ndarray    # (B, P) bool
    label: np.ndarray   # (B,)

    def __len__(self):
        return self.jet_p.shape[0]

    @classmethod
    def from_dataset(cls, ds: JetDataset, idx=None, trim: bool = True) -> "Batch":
        if idx is None:
            idx = slice(None)
        ntrk = ds.ntrk[idx]
        P = int(ntrk.max()) if trim and ntrk.size else MAX_TRACKS
        mask = np.arange(P)[None, :] < ntrk[:, None]
        return cls(ds.jet_p[idx], ds.p[idx, :P], ds.a[idx, :P], ds.q[idx, :P],
                   ds.ptype[idx, :P], mask, ds.label[idx])

    @property
    def jhat(self) -> np.ndarray:
        return self.jet_p / np.linalg.norm(self.jet_p, axis=-1, keepdims=True)

    def rotated(self, R: np.ndarray) -> "Batch":
        """Rotate every vector input by R (3x3, or one per event (B, 3, 3))."""
        R = np.asarray(R)
        if R.ndim == 2:
            return Batch(self.jet_p @ R.T, self.p @ R.T, self.a @ R.T, self.q, self.ptype, self.mask, self.label)
        return Batch(np.einsum("bij,bj->bi", R, self.jet_p), np.einsum("bij,bpj->bpi", R, self.p),
                     np.einsum("bij,bpj->bpi", R, self.a), self.q, self.ptype, self.mask, self.label)

    def permuted(self, perm: np.ndarray) -> "Batch":
        """Reorder particle slots (same permutation for every event)."""
        return Batch(self.jet_p, self.p[:, perm], self.a[:, perm], self.q[:, perm],
                     self.ptype[:, perm], self.mask[:, perm], self.label)


def log_magnitude(v: np.ndarray, scale: float) -> np.ndarray:
    """v / |v| * log(1 + |v| / scale): compresses magnitudes, keeps directions.

    A function of |v| times the direction, so it commutes with every rotation.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, v * (np.log1p(n / scale) / safe), 0.0)


def seed_tensors(v: np.ndarray) -> np.ndarray:
    """All nine outer products v_i v_j^T of three vectors: (..., 3, 3) -> (..., 9, 3, 3)."""
    outer = v[..., :, None, :, None] * v[..., None, :, None, :]
    return outer.reshape(v.shape[:-2] + (9, 3, 3))


def btn_inputs(cfg: ModelConfig, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Charge scalar, the three vector features and (for tensor models) their outer products.

    The particle-type embedding is added inside the network since it is trainable.
    """
    m = batch.mask[..., None].astype(np.float64)
    jet = np.broadcast_to(batch.jet_p[:, None, :], batch.p.shape)
    vecs = np.stack([log_magnitude(jet, cfg.momentum_scale), log_magnitude(batch.p, cfg.momentum_scale),
                     log_magnitude(batch.a, cfg.impact_scale)], axis=2)
    vecs = vecs * m[..., None]
    q = batch.q[..., None].astype(np.float64) * m
    tens = seed_tensors(vecs) if cfg.has_tensors else None
    return q, vecs, tens


def _wrap(x):
    return (x + np.pi) % (2.0 * np.pi) - np.pi


def detector_coordinates(p: np.ndarray):
    """(p_T, eta, phi) of momenta (..., 3); zero vectors map to zeros."""
    pt = np.hypot(p[..., 0], p[..., 1])
    safe = np.where(pt > 0, pt, 1.0)
    eta = np.where(pt > 0, np.arcsinh(p[..., 2] / safe), 0.0)
    phi = np.arctan2(p[..., 1], p[..., 0])
    return pt, eta, phi


def impact_projections(a: np.ndarray, p: np.ndarray):
    """Transverse (d0) and longitudinal (z0) impact parameters w.r.t. the beam (z) axis.

    d0 is the signed transverse distance of the track line from the beam axis;
    z0 is the z coordinate at the transverse point of closest approach.
    """
    pt2 = p[..., 0] ** 2 + p[..., 1] ** 2
    ok = pt2 > 0
    safe_pt2 = np.where(ok, pt2, 1.0)
    d0 = np.where(ok, (a[..., 0] * p[..., 1] - a[..., 1] * p[..., 0]) / np.sqrt(safe_pt2), 0.0)
    t = -(a[..., 0] * p[..., 0] + a[..., 1] * p[..., 1]) / safe_pt2
    z0 = np.where(ok, a[..., 2] + t * p[..., 2], 0.0)
    return d0, z0


def pfn_inputs(cfg: ModelConfig, batch: Batch) -> np.ndarray:
    """Nine numeric baseline features per track; the 3-dim type embedding makes 12."""
    jpt, jeta, jphi = detector_coordinates(batch.jet_p)
    pt, eta, phi = detector_coordinates(batch.p)
    d0, z0 = impact_projections(batch.a, batch.p)
    B, P = batch.mask.shape
    cols = [
        np.broadcast_to(jpt[:, None] / cfg.momentum_scale, (B, P)),
        np.broadcast_to(jeta[:, None], (B, P)),
        np.broadcast_to(jphi[:, None], (B, P)),
        pt / cfg.momentum_scale, eta - jeta[:, None], _wrap(phi - jphi[:, None]),
        d0 / cfg.impact_scale, z0 / cfg.impact_scale,
        batch.q.astype(np.float64),
    ]
    return np.stack(cols, axis=-1) * batch.mask[..., None]


PFN_NUMERIC_FEATURES = 9
EMBED_DIM = 3


# --- parameter construction ----------------------------------------------------------

def _uniform(rng, fan_out, fan_in, gain=1.0):
    lim = gain * np.sqrt(1.0 / fan_in)
    return rng.uniform(-lim, lim, (fan_out, fan_in))


def _dense(store, rng, name, n_in, n_out, bias=True, gain=1.0):
    store.add(f"{name}.W", _uniform(rng, n_out, n_in, gain))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def _zero_output(store, n_in):
    """Zero logit layer: an untrained model scores every event alike (AUC exactly 1/2)."""
    store.add("out.W", np.zeros((2, n_in)))
    store.add("out.b", np.zeros(2))


def _so2_init(rng, n):
    """Near-identity connection matrices: a = b = delta_ij + eps, phi = eps."""
    eye = np.eye(n)
    return (eye + rng.normal(0, 0.01, (n, n)), eye + rng.normal(0, 0.01, (n, n)),
            rng.normal(0, 0.01, (n, n)))


def _rep_layer_params(store, rng, cfg, name, n_in, n_out, hidden):
    fs, fv, ft = n_in
    g = cfg.init_gain
    _dense(store, rng, f"{name}.s", fs, n_out, gain=g)
    _dense(store, rng, f"{name}.v", fv, n_out, bias=False, gain=g)
    if cfg.has_tensors:
        _dense(store, rng, f"{name}.t", ft, n_out, gain=g)
    if hidden and cfg.enable_so2:
        a, b, phi = _so2_init(rng, n_out)
        store.add(f"{name}.so2v.a", a)
        store.add(f"{name}.so2v.b", b)
        store.add(f"{name}.so2v.phi", phi)
        if cfg.has_tensors:
            for suffix in ("", "2"):
                a, b, phi = _so2_init(rng, n_out)
                store.add(f"{name}.so2t.a{suffix}", a)
                store.add(f"{name}.so2t.b{suffix}", b)
                store.add(f"{name}.so2t.phi{suffix}", phi)


def _hidden_out_width(cfg: ModelConfig) -> int:
    w = cfg.rep_width
    if not cfg.enable_bilinear:
        return w
    F = w // 2
    return 3 * F if cfg.has_tensors else 2 * F


N_PHI_HIDDEN = 2
N_F_HIDDEN = 3
N_HEAD_HIDDEN = 2
N_PFN_PHI_HIDDEN = 2
N_PFN_F_HIDDEN = 3


def _init_params(cfg: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    store.add("embed", rng.normal(0.0, 1.0, (3, EMBED_DIM)))
    H, L = cfg.hidden_width, cfg.latent_dim
    if cfg.is_pfn:
        n = PFN_NUMERIC_FEATURES + EMBED_DIM
        for i in range(N_PFN_PHI_HIDDEN):
            _dense(store, rng, f"phi{i}", n, H)
            n = H
        _dense(store, rng, "phi_out", n, L)
        n = L
        for i in range(N_PFN_F_HIDDEN):
            _dense(store, rng, f"f{i}", n, H)
            n = H
        _zero_output(store, n)
        return store.finalize()

    n_in = (1 + EMBED_DIM, 3, 9)
    w, wo = cfg.rep_width, _hidden_out_width(cfg)
    for i in range(N_PHI_HIDDEN):
        _rep_layer_params(store, rng, cfg, f"phi{i}", n_in, w, hidden=True)
        n_in = (wo, wo, wo)
    _rep_layer_params(store, rng, cfg, "phi_out", n_in, L, hidden=False)
    n_in = (L, L, L)
    for i in range(N_F_HIDDEN):
        _rep_layer_params(store, rng, cfg, f"f{i}", n_in, w, hidden=True)
        n_in = (wo, wo, wo)
    n = wo * (3 if cfg.has_tensors else 2)
    for i in range(N_HEAD_HIDDEN):
        _dense(store, rng, f"head{i}", n, H)
        n = H
    _zero_output(store, n)
    return store.finalize()


# --- forward passes ----------------------------------------------------------------------

def _scalar_dense(t, store, name, x, relu=True):
    y = ops.scalar_affine(t, x, store[f"{name}.W"], store[f"{name}.b"])
    return ops.relu(t, y) if relu else y


def _scalar_activation(t, cfg, s):
    if cfg.scalar_activation == "relu":
        return ops.relu(t, s)
    return ops.clip_unit(t, s, 0.0 if cfg.scalar_activation == "relu1" else -1.0)


def _rep_layer(t: Tape, cfg: ModelConfig, store: ParamStore, name: str, s: Var, v: Var, T: Var | None,
               jhat: np.ndarray, hidden: bool):
    """Affine -> [SO(2) linear] -> [bilinear] -> nonlinearity; output layers stop after Affine."""
    s = ops.scalar_affine(t, s, store[f"{name}.s.W"], store[f"{name}.s.b"])
    v = ops.vector_linear(t, v, store[f"{name}.v.W"])
    if T is not None:
        T = ops.tensor_affine(t, T, store[f"{name}.t.W"], store[f"{name}.t.b"])
    if not hidden:
        return s, v, T
    if cfg.enable_so2:
        v = ops.so2_vector(t, v, jhat, *(store[f"{name}.so2v.{k}"] for k in ("a", "b", "phi")))
        if T is not None:
            T = ops.so2_tensor(t, T, jhat, *(store[f"{name}.so2t.{k}"]
                                             for k in ("a", "b", "phi", "a2", "b2", "phi2")))
    if cfg.enable_bilinear:
        s, v, T = ops.bilinear(t, s, v, T)
    s = _scalar_activation(t, cfg, s)
    v = ops.vrelu(t, v)
    if T is not None:
        T = ops.trelu(t, T)
    return s, v, T


def btn_phi(t: Tape, cfg: ModelConfig, store: ParamStore, s: Var, v: Var, T: Var | None, jhat: np.ndarray):
    """Per-particle network: two hidden representation layers and an affine output to L per rep."""
    for i in range(N_PHI_HIDDEN):
        s, v, T = _rep_layer(t, cfg, store, f"phi{i}", s, v, T, jhat, hidden=True)
    return _rep_layer(t, cfg, store, "phi_out", s, v, T, jhat, hidden=False)


def btn_forward(t: Tape, cfg: ModelConfig, store: ParamStore, batch: Batch) -> Var:
    """Logits (B, 2) of the bilinear tensor network.

    Each event is first rotated into its jet-axis frame, so every SO(2) layer
    acts about z; since all other layers are SO(3)-equivariant and the readout
    is invariant, this equals :func:`btn_forward_reference` up to rounding.
    Only valid particles run through Phi, packed as (N, 1, ...).
    """
    q, vecs, tens = btn_inputs(cfg, batch)
    mask = batch.mask
    Q = axis_frame(batch.jhat)
    ev, slot = np.nonzero(mask)
    Qp = Q[ev]
    vecs = vecs[ev, slot] @ np.swapaxes(Qp, -1, -2)
    emb = ops.embedding(t, store["embed"], batch.ptype[ev, slot][:, None])
    s = ops.concat(t, [const(q[ev, slot][:, None]), emb], axis=-1)
    v = const(vecs[:, None])
    T = const(seed_tensors(vecs)[:, None]) if tens is not None else None
    s, v, T = btn_phi(t, cfg, store, s, v, T, None)
    n = len(batch)
    s = ops.segment_sum(t, s, ev, n)
    v = ops.segment_sum(t, v, ev, n)
    if T is not None:
        T = ops.segment_sum(t, T, ev, n)
    return _btn_head(t, cfg, store, s, v, T, None)


def btn_forward_reference(t: Tape, cfg: ModelConfig, store: ParamStore, batch: Batch) -> Var:
    """Padded (B, P, ...) evaluation with SO(2) layers about each event's own axis."""
    q, vecs, tens = btn_inputs(cfg, batch)
    mask = batch.mask
    emb = ops.embedding(t, store["embed"], batch.ptype, mask)
    s = ops.concat(t, [const(q), emb], axis=-1)
    v = const(vecs)
    T = const(tens) if tens is not None else None
    jhat = batch.jhat
    s, v, T = btn_phi(t, cfg, store, s, v, T, jhat)
    s = ops.masked_sum_pool(t, s, mask)
    v = ops.masked_sum_pool(t, v, mask)
    if T is not None:
        T = ops.masked_sum_pool(t, T, mask)
    return _btn_head(t, cfg, store, s, v, T, jhat)


def _btn_head(t, cfg, store, s, v, T, jhat):
    for i in range(N_F_HIDDEN):
        s, v, T = _rep_layer(t, cfg, store, f"f{i}", s, v, T, jhat, hidden=True)
    x = ops.invariant_readout(t, s, v, T)
    for i in range(N_HEAD_HIDDEN):
        x = _scalar_dense(t, store, f"head{i}", x)
    return _scalar_dense(t, store, "out", x, relu=False)


def pfn_forward(t: Tape, cfg: ModelConfig, store: ParamStore, batch: Batch) -> Var:
    mask = batch.mask
    emb = ops.embedding(t, store["embed"], batch.ptype, mask)
    x = ops.concat(t, [const(pfn_inputs(cfg, batch)), emb], axis=-1)
    for i in range(N_PFN_PHI_HIDDEN):
        x = _scalar_dense(t, store, f"phi{i}", x)
    x = _scalar_dense(t, store, "phi_out", x, relu=False)
    x = ops.squeeze_particles(t, ops.masked_sum_pool(t, x, mask))
    for i in range(N_PFN_F_HIDDEN):
        x = _scalar_dense(t, store, f"f{i}", x)
    return _scalar_dense(t, store, "out", x, relu=False)


def invariant_readout(c: RepChannels) -> np.ndarray:
    """Raw scalars, |v|^2 per vector feature and ||T||_F^2 per tensor feature, concatenated."""
    return np.concatenate([
        c.scalars,
        np.sum(c.vectors ** 2, axis=-1),
        np.sum(c.tensors ** 2, axis=(-2, -1)),
    ], axis=-1)


class Model:
    """Configuration plus parameters; ``forward`` records onto a tape."""

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else _init_params(cfg)

    @property
    def n_params(self) -> int:
        return len(self.store)

    def forward(self, t: Tape, batch: Batch) -> Var:
        fn = pfn_forward if self.cfg.is_pfn else btn_forward
        return fn(t, self.cfg, self.store, batch)

    def logits(self, batch: Batch) -> np.ndarray:
        return self.forward(Tape(enabled=False), batch).value

    def loss(self, t: Tape, batch: Batch) -> Var:
        return ops.cross_entropy(t, self.forward(t, batch), batch.label)


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    return Model(cfg)


# --- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"BTNCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, model: Model, meta: dict | None = None, adam: AdamState | None = None) -> None:
    """magic | u32 version | u32 header length | JSON header | u64 n | n x f64 [| u64 step | m | v]."""
    header = {"config": model.cfg.to_dict(), "meta": meta or {}, "has_optimizer": adam is not None}
    if adam is not None:
        header["optimizer"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    hbytes = json.dumps(header, sort_keys=True).encode()
    values = model.store.values.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())
        if adam is not None:
            fh.write(struct.pack("<Q", adam.step))
            fh.write(adam.m.astype("<f8").tobytes())
            fh.write(adam.v.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict, AdamState | None]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen, "config header").decode())
        cfg = ModelConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header: {exc}") from exc
    (n,) = struct.unpack("<Q", take(8, "parameter count"))
    model = build_model(cfg)
    if n != model.n_params:
        raise CheckpointError(f"{path}: {n} parameters stored but config implies {model.n_params}")
    model.store.load(np.frombuffer(take(8 * n, "parameters"), dtype="<f8"))
    adam = None
    if header.get("has_optimizer"):
        (step,) = struct.unpack("<Q", take(8, "optimizer step"))
        m = np.frombuffer(take(8 * n, "optimizer moments"), dtype="<f8").copy()
        v = np.frombuffer(take(8 * n, "optimizer moments"), dtype="<f8").copy()
        adam = AdamState(m=m, v=v, step=step, **header.get("optimizer", {}))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after byte offset {pos}")
    return model, header.get("meta", {}), adam
