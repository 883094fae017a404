"""Command-line front end: reproducible subcommands emitting images, CSV
metrics, and JSON manifests into a write-once output tree."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diffusion as df
from . import hvae as hv
from . import io as srio
from . import pipeline as pl
from . import regression as rg
from .config import RunConfig, load_config, write_default_config
from .errors import (ArtifactError, NumericError, SemanticModelQualityError,
                     SingularSystemError, ValidationError)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path) -> dict[str, str]:
    path = Path(path)
    if path.is_file():
        return {path.name: _sha256(path)}
    return {str(p.relative_to(path)): _sha256(p)
            for p in sorted(path.rglob("*")) if p.is_file()}


class OutputTree:
    """out/{images,metrics,models,manifests}; artifacts are write-once."""

    def __init__(self, root):
        self.root = Path(root)
        for sub in ("images", "metrics", "models", "manifests", "data"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, sub: str, name: str, fresh: bool = True) -> Path:
        p = self.root / sub / name
        if fresh and p.exists():
            raise ArtifactError(f"refusing to overwrite existing artifact {p}")
        return p

    def existing(self, sub: str, name: str) -> Path:
        p = self.root / sub / name
        if not p.exists():
            raise ArtifactError(
                f"missing upstream artifact {p}; run the producing subcommand first")
        return p

    def write_manifest(self, command: str, cfg: RunConfig, seed: int,
                       inputs: dict[str, str], outputs: list[str],
                       derived: dict | None = None):
        manifest = {
            "command": command,
            "seed": seed,
            "config": cfg.as_manifest_dict(),
            "input_hashes": inputs,
            "outputs": sorted(outputs),
        }
        if derived:
            manifest["derived"] = derived
        path = self.path("manifests", f"{command}.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def _verify_manifest(out: OutputTree, command: str):
    p = out.existing("manifests", f"{command}.json")
    manifest = json.loads(p.read_text())
    for rel, digest in manifest["input_hashes"].items():
        target = out.root / rel
        if not target.exists():
            raise ValidationError(f"verify: input {rel} is missing")
        if _sha256(target) != digest:
            raise ValidationError(f"verify: input {rel} hash mismatch")


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_movie(out: OutputTree) -> ds.StimulusMovie:
    d = out.existing("data", "movie")
    frames, onsets, labels = srio.read_movie(d)
    if frames.shape[3] == 3 and np.allclose(frames[..., :1], frames[..., 1:2]):
        frames = frames[..., :1]  # grayscale stored as replicated channels
    return ds.StimulusMovie(onsets, frames, labels)


def _load_responses(out: OutputTree, cfg: RunConfig,
                    movie: ds.StimulusMovie) -> ds.ResponseMatrix:
    latency = cfg.get("data", "latency_offset_s")
    mats = []
    for path in sorted(out.root.joinpath("data").glob("spikes_*.csv")):
        rec = ds.load_spike_file(path)
        mats.append(ds.bin_spikes(rec, movie, latency))
    if not mats:
        raise ArtifactError("no spike files found; run gen-data first")
    return ds.aggregate_sessions(mats)


def _experiment_config(cfg: RunConfig, seed: int) -> pl.ExperimentConfig:
    return pl.ExperimentConfig(
        K=cfg.get("hvae", "k_layers"),
        lambda_grid=cfg.get("regression", "lambda_grid"),
        hvae_lr=cfg.get("hvae", "lr"),
        hvae_steps=cfg.get("hvae", "steps"),
        hvae_batch=cfg.get("hvae", "batch"),
        strength=cfg.get("diffusion", "strength"),
        w_vision=cfg.get("diffusion", "w_vision"),
        w_text=cfg.get("diffusion", "w_text"),
        seed=seed,
        diffusion=pl.DiffusionTrainConfig(
            T=cfg.get("diffusion", "t_steps"),
            beta_lo=cfg.get("diffusion", "beta_lo"),
            beta_hi=cfg.get("diffusion", "beta_hi"),
            ae_hidden=cfg.get("diffusion", "ae_hidden"),
            ae_lr=cfg.get("diffusion", "ae_lr"),
            ae_steps=cfg.get("diffusion", "ae_steps"),
            den_hidden=cfg.get("diffusion", "den_hidden"),
            den_lr=cfg.get("diffusion", "den_lr"),
            den_steps=cfg.get("diffusion", "den_steps"),
            batch=cfg.get("diffusion", "batch"),
            seed=seed),
        semantic=pl.SemanticConfig(
            feat_dim=cfg.get("semantic", "feat_dim"),
            n_classes=cfg.get("data", "n_classes"),
            lr=cfg.get("semantic", "lr"),
            steps=cfg.get("semantic", "steps"),
            batch=cfg.get("semantic", "batch"),
            seed=seed,
            min_accuracy=cfg.get("semantic", "min_accuracy")),
    )


def _hvae_config(cfg: RunConfig) -> hv.HvaeConfig:
    shape = (cfg.get("data", "height"), cfg.get("data", "width"),
             cfg.get("data", "channels"))
    return hv.HvaeConfig(shape, tuple(cfg.get("hvae", "layer_widths")),
                         cfg.get("hvae", "enc_hidden"),
                         cfg.get("hvae", "state_dim"))


def _write_metrics_csv(path, rows: list[dict]):
    cols = ["experiment", "subset", "frame", "pixel_corr", "mse", "psnr",
            "identification", "semantic_accuracy"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")


def _metrics_rows(experiment: str, subset: str, m: pl.MetricsTable,
                  frame_ids) -> list[dict]:
    rows = []
    for fi, (c, e, p) in zip(frame_ids, zip(m.pixel_corr, m.mse, m.psnr)):
        rows.append({"experiment": experiment, "subset": subset, "frame": fi,
                     "pixel_corr": f"{c:.10g}", "mse": f"{e:.10g}",
                     "psnr": f"{p:.10g}"})
    agg = m.aggregates()
    rows.append({"experiment": experiment, "subset": subset, "frame": "aggregate",
                 "pixel_corr": f"{agg['mean_pixel_corr']:.10g}",
                 "mse": f"{agg['mean_mse']:.10g}",
                 "psnr": f"{agg['mean_psnr']:.10g}",
                 "identification": f"{agg['identification']:.10g}",
                 "semantic_accuracy": f"{agg['semantic_accuracy']:.10g}"})
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = ds.synth_movie(cfg.get("data", "frames"), cfg.get("data", "height"),
                           cfg.get("data", "width"), cfg.get("data", "channels"),
                           cfg.get("data", "n_classes"), seed=seed,
                           frame_period_s=cfg.get("data", "frame_period_s"))
    movie_dir = out.path("data", "movie")
    srio.write_movie(movie_dir, movie.frames, movie.frame_onsets,
                     movie.frame_labels)
    outputs = [str(movie_dir)]
    for s in range(cfg.get("data", "sessions")):
        enc = ds.EncodingModelConfig(base_rate=cfg.get("data", "base_rate"),
                                     region_information=cfg.region_information(),
                                     filter_scale=cfg.get("data", "filter_scale"),
                                     seed=seed + 1000 * (s + 1))
        rec = ds.synth_spikes(movie, enc,
                              n_units_per_region=cfg.get("data", "units_per_region"),
                              session_id=f"s{s}")
        path = out.path("data", f"spikes_{s:02d}.csv")
        ds.write_spike_file(path, rec)
        outputs.append(str(path))
    return outputs


def cmd_psth(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    window = (0.0, cfg.get("data", "frame_period_s"))
    bin_width = window[1] / 10.0
    outputs = []
    for path in sorted(out.root.joinpath("data").glob("spikes_*.csv")):
        rec = ds.load_spike_file(path)
        present = {u.region for u in rec.units}
        for region in sorted(present):
            p = ds.psth(rec, region, movie.frame_onsets, window, bin_width)
            dest = out.path("metrics", f"psth_{rec.session_id}_{region}.csv")
            ds.write_psth_csv(p, dest)
            outputs.append(str(dest))
    return outputs


def cmd_train_hvae(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    model = hv.init_hvae(_hvae_config(cfg), seed=seed)
    hv.train_hvae(model, movie.frames[split.train_idx],
                  lr=cfg.get("hvae", "lr"), steps=cfg.get("hvae", "steps"),
                  batch=cfg.get("hvae", "batch"), seed=seed)
    dest = out.path("models", "hvae.bin")
    hv.save_hvae(dest, model)
    return [str(dest), str(dest) + ".json"]


def cmd_fit_stage1(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    responses = _load_responses(out, cfg, movie)
    model = hv.load_hvae(out.existing("models", "hvae.bin"))
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    s1 = pl.fit_stage1(responses, movie, model, cfg.get("hvae", "k_layers"),
                       cfg.get("regression", "lambda_grid"), split)
    dest = out.path("models", "stage1_ridge.bin")
    rg.save_ridge(dest, s1.ridge)
    return [str(dest), str(dest) + ".json"]


def cmd_train_diffusion(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    ecfg = _experiment_config(cfg, seed)
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    sem = pl.fit_semantic_model(movie, ecfg.semantic)
    bundle = pl.train_diffusion_models(movie, sem, split, ecfg.diffusion)
    outputs = []
    sem_path = out.path("models", "semantic.bin")
    srio.save_matrices(sem_path, {k: t.data for k, t in sem.params.items()},
                       sidecar={"kind": "semantic",
                                "feat_dim": sem.config.feat_dim,
                                "n_classes": sem.config.n_classes,
                                "heldout_accuracy": sem.heldout_accuracy,
                                "image_shape": list(sem.image_shape)})
    ae_path = out.path("models", "latent_ae.bin")
    df.save_latent_ae(ae_path, bundle.aep)
    den_path = out.path("models", "denoiser.bin")
    df.save_denoiser(den_path, bundle.denoiser)
    norm_path = out.path("models", "latent_norm.bin")
    srio.save_matrices(norm_path, {"shift": bundle.latent_shift,
                                   "scale": bundle.latent_scale},
                       sidecar={"kind": "latent_norm",
                                "schedule_T": bundle.sched.T,
                                "beta_lo": cfg.get("diffusion", "beta_lo"),
                                "beta_hi": cfg.get("diffusion", "beta_hi")})
    for p in (sem_path, ae_path, den_path, norm_path):
        outputs += [str(p), str(p) + ".json"]
    return outputs


def _load_semantic(out: OutputTree, cfg: RunConfig, seed: int
                   ) -> pl.SemanticFeatureModel:
    from .autograd import Tensor
    arrays, meta = srio.load_matrices(out.existing("models", "semantic.bin"))
    scfg = pl.SemanticConfig(feat_dim=meta["feat_dim"], n_classes=meta["n_classes"],
                             seed=seed,
                             min_accuracy=cfg.get("semantic", "min_accuracy"))
    model = pl.SemanticFeatureModel(scfg, tuple(meta["image_shape"]),
                                    {k: Tensor(v) for k, v in arrays.items()},
                                    meta["heldout_accuracy"])
    return model


def _load_bundle(out: OutputTree) -> pl.DiffusionBundle:
    aep = df.load_latent_ae(out.existing("models", "latent_ae.bin"))
    den = df.load_denoiser(out.existing("models", "denoiser.bin"))
    arrays, meta = srio.load_matrices(out.existing("models", "latent_norm.bin"))
    sched = df.make_schedule(meta["schedule_T"], meta["beta_lo"], meta["beta_hi"])
    return pl.DiffusionBundle(aep, den, sched, arrays["shift"], arrays["scale"])


def cmd_fit_stage2(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    responses = _load_responses(out, cfg, movie)
    sem = _load_semantic(out, cfg, seed)
    bundle = _load_bundle(out)
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    s2 = pl.fit_stage2(responses, movie, sem, cfg.get("regression", "lambda_grid"),
                       bundle, split, cfg.get("diffusion", "strength"),
                       cfg.get("diffusion", "w_vision"),
                       cfg.get("diffusion", "w_text"))
    v_path = out.path("models", "stage2_vision_ridge.bin")
    t_path = out.path("models", "stage2_text_ridge.bin")
    rg.save_ridge(v_path, s2.ridge_vision)
    rg.save_ridge(t_path, s2.ridge_text)
    return [str(v_path), str(v_path) + ".json", str(t_path), str(t_path) + ".json"]


def _assemble_stages(cfg: RunConfig, out: OutputTree, seed: int):
    movie = _load_movie(out)
    responses = _load_responses(out, cfg, movie)
    hmodel = hv.load_hvae(out.existing("models", "hvae.bin"))
    sem = _load_semantic(out, cfg, seed)
    bundle = _load_bundle(out)
    s1 = pl.Stage1Model(rg.load_ridge(out.existing("models", "stage1_ridge.bin")),
                        hmodel, cfg.get("hvae", "k_layers"))
    s2 = pl.Stage2Model(
        rg.load_ridge(out.existing("models", "stage2_vision_ridge.bin")),
        rg.load_ridge(out.existing("models", "stage2_text_ridge.bin")),
        bundle.denoiser, bundle.aep, bundle.sched,
        bundle.latent_shift, bundle.latent_scale,
        cfg.get("diffusion", "strength"), cfg.get("diffusion", "w_vision"),
        cfg.get("diffusion", "w_text"))
    return movie, responses, sem, s1, s2


def cmd_reconstruct(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie, responses, sem, s1, s2 = _assemble_stages(cfg, out, seed)
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    te = split.test_idx
    X_te = ds.ResponseMatrix(responses.values[te], responses.unit_ids,
                             responses.regions)
    initials = pl.stage1_reconstruct(s1, X_te, seed=seed)
    finals = pl.reconstruct(s1, s2, X_te, seed=seed)
    outputs = []
    for k, fi in enumerate(te):
        p1 = out.path("images", f"stage1_{fi:06d}.ppm")
        p2 = out.path("images", f"final_{fi:06d}.ppm")
        srio.write_ppm(p1, initials[k])
        srio.write_ppm(p2, finals[k])
        outputs += [str(p1), str(p2)]
    labels = (np.asarray(movie.frame_labels, dtype=int)[te]
              if movie.frame_labels is not None else None)
    rows = _metrics_rows("stage1", "all", pl.evaluate(initials, movie.frames[te],
                                                      labels, sem), te)
    rows += _metrics_rows("final", "all", pl.evaluate(finals, movie.frames[te],
                                                      labels, sem), te)
    mpath = out.path("metrics", "reconstruction.csv")
    _write_metrics_csv(mpath, rows)
    outputs.append(str(mpath))
    return outputs


def cmd_eval(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie, responses, sem, s1, s2 = _assemble_stages(cfg, out, seed)
    split = pl.frame_split(movie.frame_count, cfg.get("run", "test_frac"))
    te = split.test_idx
    finals = np.stack([srio.read_ppm(out.existing("images", f"final_{fi:06d}.ppm"))
                       [..., :movie.frames.shape[3]] for fi in te])
    labels = (np.asarray(movie.frame_labels, dtype=int)[te]
              if movie.frame_labels is not None else None)
    m = pl.evaluate(finals, movie.frames[te], labels, sem)
    mpath = out.path("metrics", "eval.csv")
    _write_metrics_csv(mpath, _metrics_rows("eval", "all", m, te))
    return [str(mpath)]


def cmd_ablate(cfg: RunConfig, out: OutputTree, seed: int,
               subsets: list[str]) -> list[str]:
    movie = _load_movie(out)
    responses = _load_responses(out, cfg, movie)
    ecfg = _experiment_config(cfg, seed)
    models = pl.ExperimentModels(
        _load_semantic(out, cfg, seed),
        hv.load_hvae(out.existing("models", "hvae.bin")),
        _load_bundle(out),
        pl.frame_split(movie.frame_count, cfg.get("run", "test_frac")))
    parsed = []
    for raw in subsets:
        names = {ds.validate_region(r.strip()) for r in raw.split("+")} \
            if raw != "all" else set(ds.REGION_CODES)
        parsed.append(names)
    results = pl.ablate_regions(responses, movie, models, ecfg, parsed)
    rows = []
    te = models.split.test_idx
    for key, m in results.items():
        rows += _metrics_rows("ablate", key, m, te)
    mpath = out.path("metrics", "ablation.csv")
    _write_metrics_csv(mpath, rows)
    return [str(mpath)]


def cmd_compare_vae(cfg: RunConfig, out: OutputTree, seed: int) -> list[str]:
    movie = _load_movie(out)
    responses = _load_responses(out, cfg, movie)
    ecfg = _experiment_config(cfg, seed)
    report = pl.compare_flat_vae(responses, movie, ecfg, _hvae_config(cfg))
    dest = out.path("metrics", "vae_comparison.json")
    dest.write_text(json.dumps({
        "hier_heldout_mse": report.hier_heldout_mse,
        "flat_heldout_mse": report.flat_heldout_mse,
        "hier_param_count": report.hier_param_count,
        "flat_param_count": report.flat_param_count,
        "param_ratio": report.param_ratio,
        "hier_stage1_corr": report.hier_stage1_corr,
        "flat_stage1_corr": report.flat_stage1_corr,
    }, indent=2, sort_keys=True))
    return [str(dest)]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "psth": cmd_psth,
    "train-hvae": cmd_train_hvae,
    "fit-stage1": cmd_fit_stage1,
    "train-diffusion": cmd_train_diffusion,
    "fit-stage2": cmd_fit_stage2,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare-vae": cmd_compare_vae,
}

# artifacts each command reads, for manifest input hashing
_INPUTS = {
    "gen-data": [],
    "psth": ["data"],
    "train-hvae": ["data/movie"],
    "fit-stage1": ["data", "models/hvae.bin"],
    "train-diffusion": ["data/movie"],
    "fit-stage2": ["data", "models/semantic.bin", "models/latent_ae.bin",
                   "models/denoiser.bin", "models/latent_norm.bin"],
    "reconstruct": ["data", "models"],
    "eval": ["data", "models"],
    "ablate": ["data", "models"],
    "compare-vae": ["data"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikerecon",
        description="Two-stage reconstruction of visual stimuli from spike "
                    "recordings on synthetic, fully controlled data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="INI config file (defaults are built in)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. run.seed=3")
        p.add_argument("--seed", type=int, default=None,
                       help="override [run] seed")
        p.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory")
        p.add_argument("--verify", action="store_true",
                       help="re-hash this command's recorded inputs and fail "
                            "on mismatch instead of running it")
        if name == "ablate":
            p.add_argument("--subset", action="append", default=[],
                           help="region subset like VISl or VISp+VISam or 'all'; "
                                "repeatable")
    gen = sub.add_parser("write-config")
    gen.add_argument("path", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "write-config":
        write_default_config(args.path)
        print(f"wrote default config to {args.path}")
        return 0
    try:
        cfg = load_config(args.config, args.set)
        seed = args.seed if args.seed is not None else cfg.get("run", "seed")
        out = OutputTree(args.out)
        if args.verify:
            _verify_manifest(out, args.command)
            print(f"{args.command}: inputs verified")
            return 0
        inputs = {}
        for rel in _INPUTS[args.command]:
            target = out.root / rel
            if target.exists():
                inputs.update({f"{rel}/{k}" if target.is_dir() else rel: v
                               for k, v in _hash_tree(target).items()})
        if args.command == "ablate":
            subsets = args.subset or ["VISl", "VISrl", "all"]
            outputs = cmd_ablate(cfg, out, seed, subsets)
        else:
            outputs = COMMANDS[args.command](cfg, out, seed)
        derived = None
        if args.command in ("fit-stage2", "reconstruct"):
            T = cfg.get("diffusion", "t_steps")
            derived = {"t_start": df.img2img_t_start(
                           cfg.get("diffusion", "strength"), T),
                       "t_steps": T,
                       "w_vision": cfg.get("diffusion", "w_vision"),
                       "w_text": cfg.get("diffusion", "w_text")}
        mpath = out.write_manifest(args.command, cfg, seed, inputs, outputs,
                                   derived)
        print(f"{args.command}: wrote {len(outputs)} artifacts; manifest {mpath}")
        return 0
    except (ValidationError, ArtifactError, SingularSystemError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, SemanticModelQualityError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
