"""Desk-scale latent diffusion: schedule, forward process, conditional
denoiser, ancestral reverse sampling, image-to-image refinement, and the
small image autoencoder whose latent space the diffusion runs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import io as srio
from .autograd import Tensor, concat, sgd_step
from .errors import NumericError, ShapeError, ValidationError


@dataclass
class NoiseSchedule:
    alpha: np.ndarray  # length T, each in (0, 1]

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size < 1:
            raise ValidationError("alpha must be a non-empty vector")
        if np.any(self.alpha <= 0) or np.any(self.alpha > 1):
            raise ValidationError("alpha entries must lie in (0, 1]")
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return self.alpha.size

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha


@dataclass
class LatentImage:
    values: np.ndarray
    source_shape: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("latent values must be finite")


@dataclass
class ConditioningFeatures:
    vision_feat: np.ndarray
    text_feat: np.ndarray
    w_vision: float = 0.6
    w_text: float = 0.4

    def __post_init__(self):
        if self.w_vision < 0 or self.w_text < 0:
            raise ValidationError("mixing weights must be >= 0")
        if abs(self.w_vision + self.w_text - 1.0) > 1e-9:
            raise ValidationError("mixing weights must sum to 1")

    def mixed(self) -> np.ndarray:
        return mix_conditioning(self.vision_feat, self.text_feat,
                                self.w_vision, self.w_text)


def make_schedule(T: int, beta_lo: float = 1e-4, beta_hi: float = 0.05) -> NoiseSchedule:
    """Linear beta schedule; alpha_t = 1 - beta_t."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not (0 <= beta_lo <= beta_hi < 1):
        raise ValidationError("need 0 <= beta_lo <= beta_hi < 1")
    beta = np.linspace(beta_lo, beta_hi, T)
    return NoiseSchedule(1.0 - beta)


def _values(z) -> np.ndarray:
    return z.values if isinstance(z, LatentImage) else np.asarray(z, dtype=np.float64)


def _check_t(t: int, sched: NoiseSchedule):
    if not 1 <= t <= sched.T:
        raise ValidationError(f"t must be in [1, {sched.T}], got {t}")


def forward_step(z_prev, t: int, eps, sched: NoiseSchedule):
    """One noising step: sqrt(a_t) * z_{t-1} + sqrt(1 - a_t) * eps."""
    _check_t(t, sched)
    z = _values(z_prev)
    e = _values(eps)
    if e.shape != z.shape:
        raise ShapeError("eps must match latent shape")
    a = sched.alpha[t - 1]
    return np.sqrt(a) * z + np.sqrt(1.0 - a) * e


def forward_jump(z0, t: int, eps, sched: NoiseSchedule):
    """Closed-form jump to step t: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_t(t, sched)
    z = _values(z0)
    e = _values(eps)
    if e.shape != z.shape:
        raise ShapeError("eps must match latent shape")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * e


def mix_conditioning(vision_feat, text_feat, w_vision: float = 0.6,
                     w_text: float = 0.4) -> np.ndarray:
    """Concatenate the weighted vision and text features."""
    if w_vision < 0 or w_text < 0:
        raise ValidationError("mixing weights must be >= 0")
    if abs(w_vision + w_text - 1.0) > 1e-9:
        raise ValidationError("mixing weights must sum to 1")
    v = np.asarray(vision_feat, dtype=np.float64)
    t = np.asarray(text_feat, dtype=np.float64)
    return np.concatenate([w_vision * v, w_text * t])


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    latent_dim: int = 64
    cond_dim: int = 32
    time_dim: int = 16
    hidden: int = 128


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    params: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def predict_noise(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        return _denoiser_graph(self, np.atleast_2d(_values(z_t)),
                               np.array([t]), np.atleast_2d(c)).data[0]


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    p = {}

    def affine(name, din, dout):
        p[name + "_W"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(din), (din, dout)))
        p[name + "_b"] = Tensor(np.zeros(dout))

    din = config.latent_dim + config.time_dim + config.cond_dim
    affine("in", din, config.hidden)
    affine("h2", config.hidden, config.hidden)
    affine("out", config.hidden, config.latent_dim)
    # conditioning injection into every layer (cross-attention analog)
    p["c1_W"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(config.cond_dim),
                                  (config.cond_dim, config.hidden)))
    p["c2_W"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(config.cond_dim),
                                  (config.cond_dim, config.hidden)))
    return DenoiserParams(config, p)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer step indices; rows per t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _denoiser_graph(model: DenoiserParams, z_t: np.ndarray, t: np.ndarray,
                    c: np.ndarray) -> Tensor:
    cfg = model.config
    p = model.params
    if z_t.shape[1] != cfg.latent_dim:
        raise ShapeError(f"latent dim {z_t.shape[1]} != {cfg.latent_dim}")
    if c.shape[1] != cfg.cond_dim:
        raise ShapeError(f"conditioning dim {c.shape[1]} != {cfg.cond_dim}")
    temb = time_embedding(t, cfg.time_dim)
    ct = Tensor(c)
    x = concat([Tensor(z_t), Tensor(temb), ct], axis=-1)
    h1 = (x @ p["in_W"] + ct @ p["c1_W"] + p["in_b"]).tanh()
    h2 = (h1 @ p["h2_W"] + ct @ p["c2_W"] + p["h2_b"]).tanh()
    return h2 @ p["out_W"] + p["out_b"]


def _loss_graph(model: DenoiserParams, z0b: np.ndarray, tb: np.ndarray,
                epsb: np.ndarray, cb: np.ndarray, sched: NoiseSchedule) -> Tensor:
    ab = sched.alpha_bar[tb - 1][:, None]
    z_t = np.sqrt(ab) * z0b + np.sqrt(1.0 - ab) * epsb
    pred = _denoiser_graph(model, z_t, tb, cb)
    diff = pred - Tensor(epsb)
    return (diff * diff).sum() * (1.0 / z0b.shape[0])


def denoise_loss(model: DenoiserParams, z0, t: int, eps, c,
                 sched: NoiseSchedule) -> float:
    """Single-sample squared-error estimator of the denoising objective."""
    _check_t(t, sched)
    z0 = _values(z0)
    eps = _values(eps)
    z_t = _values(forward_jump(z0, t, eps, sched))
    pred = np.asarray(model.predict_noise(z_t, t, np.asarray(c, dtype=np.float64)))
    out = float(np.sum((eps - pred) ** 2))
    if not np.isfinite(out):
        raise NumericError("non-finite denoising loss")
    return out


def train_denoiser(model: DenoiserParams, latents: np.ndarray, cond: np.ndarray,
                   sched: NoiseSchedule, lr: float = 1e-3, steps: int = 2000,
                   batch: int = 32, seed: int = 0) -> np.ndarray:
    """SGD on the noise-prediction objective, t uniform in 1..T. In place."""
    latents = np.asarray(latents, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 1:
        raise ValidationError("latents must be a non-empty N×L matrix")
    if cond.shape[0] != latents.shape[0]:
        raise ShapeError("cond and latents must have matching row counts")
    rng = np.random.default_rng(seed)
    curve = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, latents.shape[0], size=min(batch, latents.shape[0]))
        tb = rng.integers(1, sched.T + 1, size=idx.size)
        epsb = rng.normal(size=(idx.size, latents.shape[1]))
        loss = _loss_graph(model, latents[idx], tb, epsb, cond[idx], sched)
        if not np.isfinite(loss.data) or loss.data > 1e6:
            raise NumericError(f"denoiser training diverged at step {step}")
        loss.backward()
        sgd_step(model.params, lr)
        curve[step] = float(loss.data)
    return curve


def reverse_sample(model, z_start, t_start: int, c, sched: NoiseSchedule,
                   seed: int = 0) -> np.ndarray:
    """Ancestral reverse diffusion from t_start down to 1; last step noiseless.

    `model` needs a predict_noise(z, t, c) method, so oracle stubs can stand
    in for a trained denoiser.
    """
    _check_t(t_start, sched)
    z = _values(z_start).copy()
    c = np.asarray(c, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for t in range(t_start, 0, -1):
        a = sched.alpha[t - 1]
        ab = sched.alpha_bar[t - 1]
        beta = 1.0 - a
        eps_hat = model.predict_noise(z, t, c)
        mean = (z - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
        if t > 1:
            ab_prev = sched.alpha_bar[t - 2]
            sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
            z = mean + sigma * rng.normal(size=z.shape)
        else:
            z = mean
    if not np.all(np.isfinite(z)):
        raise NumericError("reverse sampling produced non-finite latents")
    return z


# ---------------------------------------------------------------------------
# latent autoencoder (image <-> latent, downsampling factor 4)


@dataclass
class LatentAeConfig:
    image_shape: tuple = (32, 32, 1)
    channels: int = 1       # latent channels per (H/4)×(W/4) cell
    hidden: int = 128

    @property
    def pixel_count(self) -> int:
        h, w, c = self.image_shape
        return h * w * c

    @property
    def latent_dim(self) -> int:
        h, w, _ = self.image_shape
        if h % 4 or w % 4:
            raise ValidationError("image sides must be divisible by 4")
        return (h // 4) * (w // 4) * self.channels


@dataclass
class LatentAeParams:
    config: LatentAeConfig
    params: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def init_latent_ae(config: LatentAeConfig, seed: int = 0) -> LatentAeParams:
    rng = np.random.default_rng(seed)
    p = {}

    def affine(name, din, dout):
        p[name + "_W"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(din), (din, dout)))
        p[name + "_b"] = Tensor(np.zeros(dout))

    affine("enc1", config.pixel_count, config.hidden)
    affine("enc2", config.hidden, config.latent_dim)
    affine("dec1", config.latent_dim, config.hidden)
    affine("dec2", config.hidden, config.pixel_count)
    return LatentAeParams(config, p)


def _ae_encode_graph(model: LatentAeParams, xb: np.ndarray) -> Tensor:
    p = model.params
    return (Tensor(xb) @ p["enc1_W"] + p["enc1_b"]).tanh() @ p["enc2_W"] + p["enc2_b"]


def _ae_decode_graph(model: LatentAeParams, zb) -> Tensor:
    p = model.params
    z = zb if isinstance(zb, Tensor) else Tensor(zb)
    return ((z @ p["dec1_W"] + p["dec1_b"]).tanh() @ p["dec2_W"] + p["dec2_b"]).sigmoid()


def ae_encode(model: LatentAeParams, image: np.ndarray) -> LatentImage:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.config.image_shape:
        raise ShapeError(f"expected image shape {model.config.image_shape}")
    z = _ae_encode_graph(model, image.reshape(1, -1)).data[0]
    return LatentImage(z, model.config.image_shape)


def ae_decode(model: LatentAeParams, z) -> np.ndarray:
    vals = _values(z)
    if vals.size != model.config.latent_dim:
        raise ShapeError(f"expected latent of length {model.config.latent_dim}")
    x = _ae_decode_graph(model, vals.reshape(1, -1)).data[0]
    return x.reshape(model.config.image_shape)


def train_latent_ae(model: LatentAeParams, images: np.ndarray, lr: float = 2e-3,
                    steps: int = 6000, batch: int = 32, seed: int = 0) -> np.ndarray:
    """SGD on per-pixel reconstruction MSE. In place; returns loss curve."""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[1] != model.config.pixel_count:
        raise ShapeError("image shape does not match config")
    rng = np.random.default_rng(seed)
    curve = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, flat.shape[0], size=min(batch, flat.shape[0]))
        xb = flat[idx]
        recon = _ae_decode_graph(model, _ae_encode_graph(model, xb))
        diff = recon - Tensor(xb)
        # per-image pixel-sum scale; a plain mean makes gradients vanish
        # with image size and SGD stalls
        loss = (diff * diff).sum() * (1.0 / xb.shape[0])
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite autoencoder loss at step {step}")
        loss.backward()
        sgd_step(model.params, lr)
        curve[step] = float(loss.data)
    return curve


# ---------------------------------------------------------------------------
# image-to-image


def img2img_t_start(strength: float, T: int) -> int:
    """Nearest schedule step, ties toward fewer noising steps: 0.75 of 50
    gives 37."""
    return max(1, int(math.ceil(strength * T - 0.5)))


def img2img(aep: LatentAeParams, model, init_image: np.ndarray, strength: float,
            c, sched: NoiseSchedule, seed: int = 0,
            latent_shift: np.ndarray | float = 0.0,
            latent_scale: np.ndarray | float = 1.0) -> np.ndarray:
    """Partially noise the init image's latent, then denoise and decode.

    t_start = round(strength * T); the default strength 0.75 with T = 50
    noising 37 steps. latent_shift/scale standardize the autoencoder's
    latent space to the unit scale the denoiser was trained at.
    """
    if not 0 < strength <= 1:
        raise ValidationError("strength must be in (0, 1]")
    t_start = img2img_t_start(strength, sched.T)
    z0 = (ae_encode(aep, init_image).values - latent_shift) / latent_scale
    rng = np.random.default_rng(seed)
    z_t = forward_jump(z0, t_start, rng.normal(size=z0.shape), sched)
    z_hat = reverse_sample(model, z_t, t_start, c, sched,
                           seed=int(rng.integers(0, 2**31)))
    return ae_decode(aep, z_hat * latent_scale + latent_shift)


# ---------------------------------------------------------------------------
# persistence


def save_denoiser(path, model: DenoiserParams):
    srio.save_matrices(path, {k: t.data for k, t in model.params.items()},
                       sidecar={"kind": "denoiser",
                                "latent_dim": model.config.latent_dim,
                                "cond_dim": model.config.cond_dim,
                                "time_dim": model.config.time_dim,
                                "hidden": model.config.hidden})


def load_denoiser(path) -> DenoiserParams:
    arrays, meta = srio.load_matrices(path)
    cfg = DenoiserConfig(meta["latent_dim"], meta["cond_dim"],
                         meta["time_dim"], meta["hidden"])
    return DenoiserParams(cfg, {k: Tensor(v) for k, v in arrays.items()})


def save_latent_ae(path, model: LatentAeParams):
    srio.save_matrices(path, {k: t.data for k, t in model.params.items()},
                       sidecar={"kind": "latent_ae",
                                "image_shape": list(model.config.image_shape),
                                "channels": model.config.channels,
                                "hidden": model.config.hidden})


def load_latent_ae(path) -> LatentAeParams:
    arrays, meta = srio.load_matrices(path)
    cfg = LatentAeConfig(tuple(meta["image_shape"]), meta["channels"], meta["hidden"])
    return LatentAeParams(cfg, {k: Tensor(v) for k, v in arrays.items()})

