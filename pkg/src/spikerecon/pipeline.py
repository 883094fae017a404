"""Two-stage reconstruction pipeline: orchestration, metrics, experiments.

Stage 1 maps spike responses to hierarchical-VAE latents and decodes a
low-resolution initial estimate. Stage 2 maps the same responses to
vision- and text-analog semantic features that condition an image-to-image
diffusion refinement of the stage-1 output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import hvae as hv
from .autograd import Tensor, concat, logsumexp, sgd_step
from .dataset import ResponseMatrix, StimulusMovie
from .errors import (NumericError, SemanticModelQualityError, ShapeError,
                     ValidationError)
from .regression import RidgeModel, ridge_cv, ridge_fit, ridge_predict


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class FrameSplit:
    """Frame-blocked train/test split; the test block is contiguous."""
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValidationError("train and test indices overlap")


def frame_split(n_frames: int, test_frac: float = 0.2) -> FrameSplit:
    """Hold out the final contiguous block of frames."""
    if not 0 < test_frac < 1:
        raise ValidationError("test_frac must be in (0,1)")
    cut = int(round(n_frames * (1.0 - test_frac)))
    cut = min(max(cut, 1), n_frames - 1)
    return FrameSplit(np.arange(cut), np.arange(cut, n_frames))


# ---------------------------------------------------------------------------
# semantic feature model (vision/text analog)


@dataclass
class SemanticConfig:
    feat_dim: int = 16
    n_classes: int = 4
    lr: float = 5e-2
    steps: int = 3000
    batch: int = 32
    seed: int = 0
    min_accuracy: float = 0.9


@dataclass
class SemanticFeatureModel:
    """Supervised classifier over frames; penultimate activations are the
    vision-analog features and output-layer weight rows the text-analog
    per-class embeddings."""
    config: SemanticConfig
    image_shape: tuple
    params: dict
    heldout_accuracy: float = float("nan")

    def _penultimate(self, xb: np.ndarray) -> np.ndarray:
        p = self.params
        return np.tanh(xb @ p["w1_W"].data + p["w1_b"].data)

    def _logits(self, xb: np.ndarray) -> np.ndarray:
        p = self.params
        return self._penultimate(xb) @ p["w2_W"].data + p["w2_b"].data

    def vision_feat(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64).reshape(1, -1)
        return self._penultimate(x)[0]

    def text_feat(self, label: int) -> np.ndarray:
        w2 = self.params["w2_W"].data
        if not 0 <= label < w2.shape[1]:
            raise ValidationError(f"unknown label {label}")
        return w2[:, label].copy()

    def classify(self, image: np.ndarray) -> int:
        x = np.asarray(image, dtype=np.float64).reshape(1, -1)
        return int(np.argmax(self._logits(x)[0]))

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def _xent_graph(params: dict, xb: np.ndarray, labels: np.ndarray) -> Tensor:
    h = (Tensor(xb) @ params["w1_W"] + params["w1_b"]).tanh()
    logits = h @ params["w2_W"] + params["w2_b"]
    lse = logsumexp(logits, axis=1)
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = (logits * Tensor(onehot)).sum(axis=1)
    return (lse - picked).mean()


def fit_semantic_model(movie: StimulusMovie, config: SemanticConfig | None = None
                       ) -> SemanticFeatureModel:
    """Train the classifier stand-in; error out if its features would be junk."""
    if movie.frame_labels is None:
        raise ValidationError("movie must carry frame labels")
    labels = np.asarray(movie.frame_labels, dtype=int)
    n_classes = int(labels.max()) + 1
    config = config or SemanticConfig()
    if config.n_classes < n_classes:
        config = SemanticConfig(**{**config.__dict__, "n_classes": n_classes})
    rng = np.random.default_rng(config.seed)
    flat = movie.frames.reshape(movie.frame_count, -1)
    split = frame_split(movie.frame_count)
    p = {
        "w1_W": Tensor(rng.normal(0, 1 / np.sqrt(flat.shape[1]),
                                  (flat.shape[1], config.feat_dim))),
        "w1_b": Tensor(np.zeros(config.feat_dim)),
        "w2_W": Tensor(rng.normal(0, 1 / np.sqrt(config.feat_dim),
                                  (config.feat_dim, config.n_classes))),
        "w2_b": Tensor(np.zeros(config.n_classes)),
    }
    xtr, ytr = flat[split.train_idx], labels[split.train_idx]
    for step in range(config.steps):
        idx = rng.integers(0, xtr.shape[0], size=min(config.batch, xtr.shape[0]))
        loss = _xent_graph(p, xtr[idx], ytr[idx])
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite classifier loss at step {step}")
        loss.backward()
        sgd_step(p, config.lr)
    model = SemanticFeatureModel(config, movie.frames.shape[1:], p)
    preds = np.argmax(model._logits(flat[split.test_idx]), axis=1)
    acc = float(np.mean(preds == labels[split.test_idx]))
    model.heldout_accuracy = acc
    if acc < config.min_accuracy:
        raise SemanticModelQualityError(
            f"semantic classifier held-out accuracy {acc:.3f} "
            f"< {config.min_accuracy}")
    return model


# ---------------------------------------------------------------------------
# stage models


@dataclass
class Stage1Model:
    ridge: RidgeModel
    hvae: hv.HvaeParams
    K: int

    def __post_init__(self):
        expect = sum(self.hvae.config.layer_widths[:self.K])
        if self.ridge.weights.shape[1] != expect:
            raise ShapeError("ridge target dim does not match first-K latent width")


@dataclass
class Stage2Model:
    ridge_vision: RidgeModel
    ridge_text: RidgeModel
    denoiser: df.DenoiserParams
    aep: df.LatentAeParams
    sched: df.NoiseSchedule
    latent_shift: np.ndarray
    latent_scale: np.ndarray
    strength: float = 0.75
    w_vision: float = 0.6
    w_text: float = 0.4


def latent_targets(model: hv.HvaeParams, movie: StimulusMovie, K: int) -> np.ndarray:
    return np.stack([hv.extract_latent_vector(model, x, K) for x in movie.frames])


def fit_stage1(responses: ResponseMatrix, movie: StimulusMovie,
               hvae_model: hv.HvaeParams, K: int, lambda_grid,
               split: FrameSplit | None = None) -> Stage1Model:
    """Ridge from spike responses to first-K latent vectors (training block only)."""
    if responses.frame_count != movie.frame_count:
        raise ShapeError("responses and movie must have equal frame counts")
    split = split or frame_split(movie.frame_count)
    Y = latent_targets(hvae_model, movie, K)
    _, model = ridge_cv(responses.values[split.train_idx], Y[split.train_idx],
                        lambda_grid)
    return Stage1Model(model, hvae_model, K)


def stage1_reconstruct(m: Stage1Model, responses: ResponseMatrix | np.ndarray,
                       seed: int = 0) -> np.ndarray:
    """Predict latents per row and decode the low-resolution initial estimates."""
    X = responses.values if isinstance(responses, ResponseMatrix) else np.asarray(responses)
    preds = ridge_predict(m.ridge, X)
    return np.stack([hv.reconstruct_from_vector(m.hvae, v, m.K, seed=seed)
                     for v in preds])


@dataclass
class DiffusionBundle:
    aep: df.LatentAeParams
    denoiser: df.DenoiserParams
    sched: df.NoiseSchedule
    latent_shift: np.ndarray
    latent_scale: np.ndarray


@dataclass
class DiffusionTrainConfig:
    T: int = 50
    beta_lo: float = 1e-4
    beta_hi: float = 0.05
    ae_hidden: int = 256
    ae_lr: float = 2e-3
    ae_steps: int = 6000
    den_hidden: int = 128
    den_lr: float = 2e-3
    den_steps: int = 4000
    batch: int = 32
    seed: int = 0


def train_diffusion_models(movie: StimulusMovie, sem: SemanticFeatureModel,
                           split: FrameSplit,
                           config: DiffusionTrainConfig | None = None
                           ) -> DiffusionBundle:
    """Train the latent autoencoder and the conditional denoiser on the
    training frames, conditioning on the true semantic features."""
    config = config or DiffusionTrainConfig()
    image_shape = movie.frames.shape[1:]
    aep = df.init_latent_ae(df.LatentAeConfig(image_shape, hidden=config.ae_hidden),
                            seed=config.seed)
    tr_frames = movie.frames[split.train_idx]
    df.train_latent_ae(aep, tr_frames, lr=config.ae_lr, steps=config.ae_steps,
                       batch=config.batch, seed=config.seed)
    latents = np.stack([df.ae_encode(aep, x).values for x in tr_frames])
    shift = latents.mean(axis=0)
    scale = np.maximum(latents.std(axis=0), 1e-6)
    latents = (latents - shift) / scale
    labels = np.asarray(movie.frame_labels, dtype=int)[split.train_idx]
    cond = np.stack([df.mix_conditioning(sem.vision_feat(x), sem.text_feat(int(l)))
                     for x, l in zip(tr_frames, labels)])
    sched = df.make_schedule(config.T, config.beta_lo, config.beta_hi)
    den = df.init_denoiser(df.DenoiserConfig(latent_dim=latents.shape[1],
                                             cond_dim=cond.shape[1],
                                             hidden=config.den_hidden),
                           seed=config.seed)
    df.train_denoiser(den, latents, cond, sched, lr=config.den_lr,
                      steps=config.den_steps, batch=config.batch,
                      seed=config.seed)
    return DiffusionBundle(aep, den, sched, shift, scale)


def fit_stage2(responses: ResponseMatrix, movie: StimulusMovie,
               sem: SemanticFeatureModel, lambda_grid,
               bundle: DiffusionBundle, split: FrameSplit | None = None,
               strength: float = 0.75, w_vision: float = 0.6,
               w_text: float = 0.4) -> Stage2Model:
    """Two ridge fits (spikes -> vision features, spikes -> text features)."""
    if responses.frame_count != movie.frame_count:
        raise ShapeError("responses and movie must have equal frame counts")
    if movie.frame_labels is None:
        raise ValidationError("movie must carry frame labels")
    split = split or frame_split(movie.frame_count)
    vision = np.stack([sem.vision_feat(x) for x in movie.frames])
    labels = np.asarray(movie.frame_labels, dtype=int)
    text = np.stack([sem.text_feat(int(l)) for l in labels])
    tr = split.train_idx
    _, rv = ridge_cv(responses.values[tr], vision[tr], lambda_grid)
    _, rt = ridge_cv(responses.values[tr], text[tr], lambda_grid)
    return Stage2Model(rv, rt, bundle.denoiser, bundle.aep, bundle.sched,
                       bundle.latent_shift, bundle.latent_scale,
                       strength, w_vision, w_text)


def reconstruct(s1: Stage1Model, s2: Stage2Model,
                responses: ResponseMatrix | np.ndarray, seed: int = 0
                ) -> np.ndarray:
    """Full two-stage reconstruction for each response row."""
    X = responses.values if isinstance(responses, ResponseMatrix) else np.asarray(responses)
    initials = stage1_reconstruct(s1, X, seed=seed)
    v_pred = ridge_predict(s2.ridge_vision, X)
    t_pred = ridge_predict(s2.ridge_text, X)
    out = []
    for i, init in enumerate(initials):
        c = df.mix_conditioning(v_pred[i], t_pred[i], s2.w_vision, s2.w_text)
        out.append(df.img2img(s2.aep, s2.denoiser, init, s2.strength, c,
                              s2.sched, seed=seed + 7919 * i,
                              latent_shift=s2.latent_shift,
                              latent_scale=s2.latent_scale))
    return np.stack(out)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsTable:
    pixel_corr: np.ndarray        # per image
    mse: np.ndarray               # per image
    psnr: np.ndarray              # per image
    identification: float         # two-way identification accuracy
    semantic_accuracy: float

    def aggregates(self) -> dict:
        return {
            "mean_pixel_corr": float(np.mean(self.pixel_corr)),
            "mean_mse": float(np.mean(self.mse)),
            "mean_psnr": float(np.mean(self.psnr)),
            "identification": float(self.identification),
            "semantic_accuracy": float(self.semantic_accuracy),
        }


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def identification_accuracy(recons: np.ndarray, truths: np.ndarray) -> float:
    """Fraction of ordered test pairs where a reconstruction is closer (by
    pixel correlation) to its own stimulus than to the distractor's."""
    n = len(recons)
    corr = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            corr[i, j] = pearson(recons[i], truths[j])
    wins = 0
    total = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            wins += corr[i, i] > corr[i, j]
            total += 1
    return wins / total if total else 1.0


def evaluate(recons: np.ndarray, truths: np.ndarray, labels,
             sem: SemanticFeatureModel | None) -> MetricsTable:
    if len(recons) != len(truths):
        raise ShapeError("recons and truths must have equal lengths")
    n = len(recons)
    corr = np.array([pearson(recons[i], truths[i]) for i in range(n)])
    mse = np.array([float(np.mean((recons[i] - truths[i]) ** 2)) for i in range(n)])
    with np.errstate(divide="ignore"):
        psnr = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)),
                        np.inf)
    ident = identification_accuracy(recons, truths)
    if sem is not None and labels is not None:
        labels = np.asarray(labels, dtype=int)
        if len(labels) != n:
            raise ShapeError("labels length mismatch")
        sem_acc = float(np.mean([sem.classify(r) == l for r, l in zip(recons, labels)]))
    else:
        sem_acc = float("nan")
    return MetricsTable(corr, mse, psnr, ident, sem_acc)


# ---------------------------------------------------------------------------
# permutation nulls


def stage1_test_correlation(m: Stage1Model, responses: ResponseMatrix,
                            targets: np.ndarray, split: FrameSplit) -> float:
    """Mean per-dimension Pearson correlation on the held-out block."""
    pred = ridge_predict(m.ridge, responses.values[split.test_idx])
    true = targets[split.test_idx]
    cols = [pearson(pred[:, d], true[:, d]) for d in range(true.shape[1])
            if true[:, d].std() > 0]
    return float(np.mean(cols)) if cols else 0.0


def permutation_null_correlation(X: np.ndarray, Y: np.ndarray,
                                 split: FrameSplit, lam: float,
                                 n_perm: int = 1000, seed: int = 0) -> np.ndarray:
    """Null distribution of the held-out latent-prediction correlation,
    obtained by permuting training-block responses against their frames."""
    rng = np.random.default_rng(seed)
    tr, te = split.train_idx, split.test_idx
    null = np.empty(n_perm)
    for k in range(n_perm):
        perm = rng.permutation(tr.size)
        m = ridge_fit(X[tr][perm], Y[tr], lam)
        pred = ridge_predict(m, X[te])
        cols = [pearson(pred[:, d], Y[te][:, d]) for d in range(Y.shape[1])
                if Y[te][:, d].std() > 0]
        null[k] = np.mean(cols) if cols else 0.0
    return null


def pairing_null_identification(recons: np.ndarray, truths: np.ndarray,
                                n_perm: int = 1000, seed: int = 0) -> np.ndarray:
    """Null for identification accuracy: permute the recon-truth pairing."""
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for k in range(n_perm):
        perm = rng.permutation(len(truths))
        null[k] = identification_accuracy(recons, truths[perm])
    return null


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentModels:
    sem: SemanticFeatureModel
    hvae: hv.HvaeParams
    bundle: DiffusionBundle
    split: FrameSplit


@dataclass
class ExperimentConfig:
    K: int = 3
    lambda_grid: tuple = (1e-3, 1e-2, 1e-1, 1.0)
    hvae_lr: float = 5e-3
    hvae_steps: int = 4000
    hvae_batch: int = 16
    strength: float = 0.75
    w_vision: float = 0.6
    w_text: float = 0.4
    seed: int = 0
    diffusion: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)


def train_shared_models(movie: StimulusMovie, cfg: ExperimentConfig,
                        hvae_config: hv.HvaeConfig | None = None
                        ) -> ExperimentModels:
    """Train the response-independent models once; region subsets reuse them."""
    split = frame_split(movie.frame_count)
    sem_cfg = SemanticConfig(**{**cfg.semantic.__dict__, "seed": cfg.seed})
    sem = fit_semantic_model(movie, sem_cfg)
    hvae_config = hvae_config or hv.HvaeConfig(image_shape=movie.frames.shape[1:])
    model = hv.init_hvae(hvae_config, seed=cfg.seed)
    hv.train_hvae(model, movie.frames[split.train_idx], lr=cfg.hvae_lr,
                  steps=cfg.hvae_steps, batch=cfg.hvae_batch, seed=cfg.seed)
    diff_cfg = DiffusionTrainConfig(**{**cfg.diffusion.__dict__, "seed": cfg.seed})
    bundle = train_diffusion_models(movie, sem, split, diff_cfg)
    return ExperimentModels(sem, model, bundle, split)


def run_decoding(responses: ResponseMatrix, movie: StimulusMovie,
                 models: ExperimentModels, cfg: ExperimentConfig
                 ) -> tuple[MetricsTable, MetricsTable, Stage1Model, Stage2Model]:
    """Fit both stages on the training block and evaluate held-out frames.

    Returns (final metrics, stage-1-only metrics, stage models).
    """
    split = models.split
    s1 = fit_stage1(responses, movie, models.hvae, cfg.K, cfg.lambda_grid, split)
    s2 = fit_stage2(responses, movie, models.sem, cfg.lambda_grid,
                    models.bundle, split, cfg.strength, cfg.w_vision, cfg.w_text)
    te = split.test_idx
    X_te = responses.values[te]
    labels = np.asarray(movie.frame_labels, dtype=int)[te] \
        if movie.frame_labels is not None else None
    initials = stage1_reconstruct(s1, X_te, seed=cfg.seed)
    finals = reconstruct(s1, s2, ResponseMatrix(X_te,
                                                responses.unit_ids,
                                                responses.regions),
                         seed=cfg.seed)
    truths = movie.frames[te]
    final_metrics = evaluate(finals, truths, labels, models.sem)
    stage1_metrics = evaluate(initials, truths, labels, models.sem)
    return final_metrics, stage1_metrics, s1, s2


def ablate_regions(responses: ResponseMatrix, movie: StimulusMovie,
                   models: ExperimentModels, cfg: ExperimentConfig,
                   subsets: list[set]) -> dict[str, MetricsTable]:
    """Repeat the whole fit/reconstruct/evaluate path per region subset."""
    from .dataset import filter_by_region
    out = {}
    for subset in subsets:
        key = "+".join(sorted(subset))
        sub = filter_by_region(responses, subset)
        final, _, _, _ = run_decoding(sub, movie, models, cfg)
        out[key] = final
    return out


@dataclass
class VaeComparisonReport:
    hier_heldout_mse: float
    flat_heldout_mse: float
    hier_param_count: int
    flat_param_count: int
    hier_stage1_corr: float
    flat_stage1_corr: float

    @property
    def param_ratio(self) -> float:
        return self.flat_param_count / self.hier_param_count


def heldout_recon_mse(model: hv.HvaeParams, frames: np.ndarray,
                      n_draws: int = 4, seed: int = 0) -> float:
    """Reconstruction error through the model's actual generative path:
    sample the posterior, decode, average squared error over a few draws."""
    errs = []
    for i, x in enumerate(frames):
        for rep in range(n_draws):
            _, z = hv.encode(model, x, seed=seed + 31 * i + rep)
            errs.append(np.mean((hv.decode(model, z) - x) ** 2))
    return float(np.mean(errs))


def compare_flat_vae(responses: ResponseMatrix, movie: StimulusMovie,
                     cfg: ExperimentConfig,
                     hvae_config: hv.HvaeConfig | None = None
                     ) -> VaeComparisonReport:
    """Train hierarchical and parameter-matched flat VAEs on identical data
    and compare held-out reconstruction plus stage-1 decoding quality."""
    split = frame_split(movie.frame_count)
    hvae_config = hvae_config or hv.HvaeConfig(image_shape=movie.frames.shape[1:])
    flat_config = hv.matched_flat_config(hvae_config)
    results = {}
    for name, c, K in (("hier", hvae_config, cfg.K), ("flat", flat_config, 1)):
        model = hv.init_hvae(c, seed=cfg.seed)
        hv.train_hvae(model, movie.frames[split.train_idx], lr=cfg.hvae_lr,
                      steps=cfg.hvae_steps, batch=cfg.hvae_batch, seed=cfg.seed)
        mse = heldout_recon_mse(model, movie.frames[split.test_idx],
                                seed=cfg.seed)
        s1 = fit_stage1(responses, movie, model, K, cfg.lambda_grid, split)
        targets = latent_targets(model, movie, K)
        corr = stage1_test_correlation(s1, responses, targets, split)
        results[name] = (mse, model.param_count(), corr)
    return VaeComparisonReport(results["hier"][0], results["flat"][0],
                               results["hier"][1], results["flat"][1],
                               results["hier"][2], results["flat"][2])
