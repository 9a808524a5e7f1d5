"""Command line front end: gen, train, eval, ablate, export-mesh.

One JSON config file drives everything; any flag given on the command line
overrides the matching config key, and the effective config is written into
the output directory before work starts. Training runs in float32 by
default, evaluation always recomputes in float64 from the checkpoint.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import os
import statistics
import sys
from dataclasses import dataclass

import numpy as np

from . import losses, meshcore, meshdecoder, metrics, ndtensor as nd, synthdata, voxelnet
from .losses import LossWeights
from .meshdecoder import MeshDecoderConfig
from .ndtensor import Tensor
from .voxelnet import VoxelNetConfig

SAMPLER_CHOICES = ("ps", "lns")
UNPOOL_CHOICES = ("umu", "amu")
COMBO_ORDER = ("ps+umu", "lns+umu", "ps+amu", "lns+amu")


class ConfigError(ValueError):
    """Bad config file, flag value, or checkpoint/config mismatch."""


class NumericError(RuntimeError):
    """Non-finite values reached the optimizer state or loss."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, serializable as one flat JSON object."""

    levels: int = 3
    init_subdiv: int = 2
    base_channels: int = 8
    feature_width: int = 32
    state_width: int = 32
    neighborhood_size: int = 8
    amu_threshold: float = 0.05
    sampler: str = "lns"
    unpool: str = "amu"
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.5
    lambda4: float = 0.5
    chamfer_samples: int = 3000
    per_stage_regularizers: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1000
    checkpoint_every: int = 200
    dtype: str = "float32"
    seed: int = 0
    eval_seed: int = 0
    eval_samples: int = 10000
    count: int = 26
    extent: int = 32
    noise_sigma: float = 0.02
    n_points: int = 4096
    ratio: float = 0.5
    data_dir: str = "data"
    run_dir: str = "run"

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not 0 <= self.init_subdiv <= 5:
            raise ConfigError("init_subdiv must lie in 0..5")
        if self.sampler not in SAMPLER_CHOICES:
            raise ConfigError(f"sampler must be one of {SAMPLER_CHOICES}")
        if self.unpool not in UNPOOL_CHOICES:
            raise ConfigError(f"unpool must be one of {UNPOOL_CHOICES}")
        step = 2 ** (self.levels - 1)
        if self.extent < 2 or self.extent % step:
            raise ConfigError(
                f"extent {self.extent} must be divisible by {step} "
                f"(2^(levels-1)) and at least 2")
        for name in ("base_channels", "feature_width", "state_width",
                     "neighborhood_size", "chamfer_samples", "steps",
                     "checkpoint_every", "eval_samples", "n_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.amu_threshold <= 0:
            raise ConfigError("amu_threshold must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.count < 2:
            raise ConfigError("count must be >= 2")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError("ratio must lie strictly between 0 and 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        return cls(**data)

    def voxel_config(self) -> VoxelNetConfig:
        return VoxelNetConfig(levels=self.levels, base_channels=self.base_channels)

    def mesh_config(self, **overrides) -> MeshDecoderConfig:
        kw = dict(levels=self.levels, init_subdiv=self.init_subdiv,
                  sampler=self.sampler, unpool=self.unpool,
                  threshold_frac=self.amu_threshold,
                  feature_width=self.feature_width,
                  state_width=self.state_width,
                  neighborhood_size=self.neighborhood_size)
        kw.update(overrides)
        return MeshDecoderConfig(**kw)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           lambda3=self.lambda3, lambda4=self.lambda4,
                           stages=self.levels,
                           chamfer_samples=self.chamfer_samples,
                           per_stage_regularizers=self.per_stage_regularizers)


def code_version() -> str:
    """Content hash over the package sources, for run provenance."""
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha1()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as f:
                digest.update(name.encode())
                digest.update(f.read())
    return digest.hexdigest()


def worker_count(requested: int) -> int:
    """Requested workers capped by the V2S_THREADS environment variable."""
    if requested < 1:
        raise ConfigError("workers must be >= 1")
    cap = os.environ.get("V2S_THREADS")
    if cap is None:
        return requested
    try:
        cap_n = int(cap)
    except ValueError:
        raise ConfigError(f"V2S_THREADS must be an integer, got {cap!r}")
    if cap_n < 1:
        raise ConfigError("V2S_THREADS must be >= 1")
    return min(requested, cap_n)


class Adam:
    """Bias-corrected adaptive moments over a fixed name -> Tensor dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {name: params[name] for name in sorted(params)}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- filesystem helpers ------------------------------------------------------


def _fresh_dir(path: str) -> str:
    """Create path; refuse to touch a directory that already has content."""
    if os.path.exists(path) and os.listdir(path):
        raise ConfigError(f"refusing to write into non-empty directory {path}")
    os.makedirs(path, exist_ok=True)
    return path

def _dump_effective_config(cfg: RunConfig, out_dir: str, command: str) -> None:
    payload = {"command": command, "code_version": code_version(),
               "config": cfg.as_dict()}
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(payload, sort_keys=True))

def _sample_name(index: int) -> str:
    return f"sample_{index:03d}"


# -- dataset on disk ---------------------------------------------------------


def _write_sample(data_dir: str, index: int, cfg: RunConfig) -> dict:
    spec, sample = synthdata.make_sample(
        index, cfg.seed, cfg.extent, cfg.noise_sigma, cfg.n_points)
    name = _sample_name(index)
    sdir = os.path.join(data_dir, name)
    os.makedirs(sdir, exist_ok=True)
    synthdata.save_volume(os.path.join(sdir, "volume.vxl"),
                          sample.volume.data[0])
    synthdata.save_volume(os.path.join(sdir, "labels.vxl"),
                          sample.labels.data)
    synthdata.save_points_obj(os.path.join(sdir, "points.obj"),
                              sample.gt_points.data, sample.gt_normals.data)
    return {"name": name, "kind": spec.kind, "seed": sample.seed}


def _gen_worker(args: tuple) -> dict:
    data_dir, index, cfg_dict = args
    return _write_sample(data_dir, index, RunConfig.from_dict(cfg_dict))


@dataclass
class LoadedSample:
    name: str
    volume: np.ndarray      # [D,H,W] float32 as stored
    labels: np.ndarray      # [D,H,W] int
    gt_points: np.ndarray   # [M,3] float64
    gt_normals: np.ndarray  # [M,3] float64


def load_sample_dir(data_dir: str, name: str) -> LoadedSample:
    sdir = os.path.join(data_dir, name)
    volume = synthdata.load_volume(os.path.join(sdir, "volume.vxl"))
    labels_f = synthdata.load_volume(os.path.join(sdir, "labels.vxl"))
    points, normals = synthdata.load_points_obj(os.path.join(sdir, "points.obj"))
    return LoadedSample(name=name, volume=volume,
                        labels=labels_f.astype(np.int64),
                        gt_points=points, gt_normals=normals)


def read_split(data_dir: str) -> tuple[dict, list[str], list[str]]:
    manifest = synthdata.read_manifest(os.path.join(data_dir, "manifest.json"))
    return manifest, list(manifest["train"]), list(manifest["test"])


# -- model assembly ----------------------------------------------------------


def init_all_params(cfg: RunConfig) -> tuple[dict, dict[str, Tensor], list]:
    """Voxel params, merged named dict, and mesh blocks, from cfg.seed."""
    vcfg = cfg.voxel_config()
    mcfg = cfg.mesh_config()
    voxel = voxelnet.init_params(vcfg, np.random.default_rng((cfg.seed, 0)))
    blocks = meshdecoder.init_mesh_params(
        vcfg, mcfg, np.random.default_rng((cfg.seed, 1)))
    named = dict(voxel)
    named.update(meshdecoder.named_mesh_parameters(blocks))
    return voxel, named, blocks


def load_params_into(named: dict[str, Tensor], loaded: dict[str, Tensor]) -> None:
    have, want = sorted(loaded), sorted(named)
    if have != want:
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        raise ConfigError(
            f"checkpoint does not match config: missing {missing[:4]}, "
            f"unexpected {extra[:4]}")
    for name, t in named.items():
        src = loaded[name].data
        if src.shape != t.data.shape:
            raise ConfigError(
                f"checkpoint shape mismatch for {name}: "
                f"{src.shape} vs {t.data.shape}")
        t.data[...] = src


def forward_sample(sample: LoadedSample, voxel, blocks, cfg: RunConfig):
    volume = Tensor(sample.volume[None])
    return meshdecoder.forward(volume, voxel, blocks,
                               cfg.voxel_config(), cfg.mesh_config())


# -- commands ----------------------------------------------------------------


def cmd_gen(cfg: RunConfig, workers: int = 1) -> int:
    data_dir = _fresh_dir(cfg.data_dir)
    _dump_effective_config(cfg, data_dir, "gen")
    n = worker_count(workers)
    indices = range(cfg.count)
    if n > 1:
        jobs = [(data_dir, i, cfg.as_dict()) for i in indices]
        with concurrent.futures.ProcessPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(_gen_worker, jobs))
    else:
        rows = [_write_sample(data_dir, i, cfg) for i in indices]
    rows.sort(key=lambda r: r["name"])
    train_idx, test_idx = synthdata.split_indices(cfg.count, cfg.seed, cfg.ratio)
    manifest = {
        "count": cfg.count,
        "extent": cfg.extent,
        "seed": cfg.seed,
        "noise_sigma": cfg.noise_sigma,
        "n_points": cfg.n_points,
        "samples": rows,
        "train": [_sample_name(i) for i in train_idx],
        "test": [_sample_name(i) for i in test_idx],
    }
    synthdata.write_manifest(os.path.join(data_dir, "manifest.json"), manifest)
    print(f"gen: wrote {cfg.count} samples "
          f"({len(train_idx)} train / {len(test_idx)} test) to {data_dir}")
    return 0


def _save_ckpt(path: str, named: dict[str, Tensor], cfg: RunConfig,
               step: int) -> None:
    nd.save_checkpoint(path, named, meta={
        "config": cfg.as_dict(), "step": step, "code_version": code_version()})


def cmd_train(cfg: RunConfig) -> int:
    run_dir = _fresh_dir(cfg.run_dir)
    _dump_effective_config(cfg, run_dir, "train")
    nd.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)

    manifest, train_names, test_names = read_split(cfg.data_dir)
    if int(manifest["extent"]) != cfg.extent:
        raise ConfigError(
            f"dataset extent {manifest['extent']} != config extent {cfg.extent}")
    train = [load_sample_dir(cfg.data_dir, n) for n in train_names]
    test = [load_sample_dir(cfg.data_dir, n) for n in test_names]

    voxel, named, blocks = init_all_params(cfg)
    weights = cfg.loss_weights()
    opt = Adam(named, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log_path = os.path.join(run_dir, "train_log.jsonl")
    last_ckpt = None

    good_state: dict[str, np.ndarray] | None = None

    def abort(step: int, why: str) -> int:
        apath = os.path.join(run_dir, "ckpt_abort.ckpt")
        if good_state is not None:
            snap = {n: Tensor(a, dtype=a.dtype) for n, a in good_state.items()}
        else:
            snap = named
        _save_ckpt(apath, snap, cfg, step)
        diag = {"step": step, "reason": why, "checkpoint": apath,
                "last_periodic_checkpoint": last_ckpt}
        with open(os.path.join(run_dir, "abort.json"), "w") as f:
            json.dump(diag, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"train: numeric failure at step {step}: {why}", file=sys.stderr)
        return 3

    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            sample = train[step % len(train)]
            nd.reset_tape()
            opt.zero_grad()
            try:
                meshes, seg = forward_sample(sample, voxel, blocks, cfg)
                bad = next((m for m in meshes
                            if not np.isfinite(m.vertices.data).all()), None)
                if bad is not None:
                    return abort(step, "non-finite vertex positions")
                rng = np.random.default_rng((cfg.seed, 2, step))
                loss, report = losses.total_loss(
                    meshes, seg, Tensor(sample.gt_points),
                    sample.gt_normals, sample.labels, weights, rng)
            except (ValueError, FloatingPointError) as exc:
                # Step 0 runs on freshly initialized parameters, so a failure
                # there is a setup problem; later ones mean the optimizer
                # drove the model into non-finite territory.
                if step == 0:
                    raise
                return abort(step, str(exc))
            if not np.isfinite(report.total):
                return abort(step, f"non-finite loss {report.total!r}")
            # This parameter state just produced a finite loss; keep a copy
            # so an abort can hand back something usable.
            good_state = {n: p.data.copy() for n, p in named.items()}
            nd.backward(loss)
            opt.step()
            log.write(report.json_line(step=step, sample=sample.name) + "\n")
            log.flush()
            if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                last_ckpt = os.path.join(run_dir, f"ckpt_step_{step + 1:06d}.ckpt")
                _save_ckpt(last_ckpt, named, cfg, step + 1)

    last_ckpt = os.path.join(run_dir, "ckpt_final.ckpt")
    _save_ckpt(last_ckpt, named, cfg, cfg.steps)

    mesh_dir = os.path.join(run_dir, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    for sample in test:
        nd.reset_tape()
        meshes, _ = forward_sample(sample, voxel, blocks, cfg)
        final = meshes[-1]
        meshcore.save_obj(os.path.join(mesh_dir, f"{sample.name}.obj"),
                          final.vertices.data, final.faces)
    nd.reset_tape()
    print(f"train: {cfg.steps} steps done, checkpoint at {last_ckpt}")
    return 0


def _config_from_checkpoint(meta: dict, overrides: dict) -> RunConfig:
    stored = dict(meta.get("config", {}))
    if not stored:
        raise ConfigError("checkpoint carries no config block")
    arch_keys = ("levels", "init_subdiv", "base_channels", "feature_width",
                 "state_width", "neighborhood_size", "sampler", "unpool")
    for key in arch_keys:
        if key in overrides and overrides[key] != stored.get(key):
            raise ConfigError(
                f"{key} mismatch: checkpoint has {stored.get(key)!r}, "
                f"flags ask for {overrides[key]!r}")
    stored.update(overrides)
    return RunConfig.from_dict(stored)


def _eval_rows(cfg: RunConfig, samples: list[LoadedSample], voxel, blocks,
               mesh_dir: str | None) -> list[metrics.SampleEval]:
    rows = []
    for sample in samples:
        nd.reset_tape()
        meshes, _ = forward_sample(sample, voxel, blocks, cfg)
        final = meshes[-1]
        d, h, w = sample.labels.shape
        pred = metrics.voxelize(final, d, h, w)
        rows.append(metrics.SampleEval(
            sample_id=sample.name,
            iou=metrics.iou(pred, sample.labels.astype(np.float64)),
            chamfer=metrics.chamfer_eval(final, sample.gt_points,
                                         samples=cfg.eval_samples,
                                         seed=cfg.eval_seed),
            vertices=final.num_vertices))
        if mesh_dir is not None:
            meshcore.save_obj(os.path.join(mesh_dir, f"{sample.name}.obj"),
                              final.vertices.data, final.faces)
    nd.reset_tape()
    return rows


def evaluate_checkpoint(ckpt_path: str, data_dir: str, cfg: RunConfig,
                        out_dir: str | None, split: str = "test"
                        ) -> metrics.EvalReport:
    """Float64 re-run of a checkpoint over one dataset split."""
    nd.set_default_dtype(np.float64)
    loaded, _ = nd.load_checkpoint(ckpt_path)
    voxel, named, blocks = init_all_params(cfg)
    load_params_into(named, loaded)
    _, train_names, test_names = read_split(data_dir)
    names = {"train": train_names, "test": test_names}[split]
    samples = [load_sample_dir(data_dir, n) for n in names]
    mesh_dir = None
    if out_dir is not None:
        mesh_dir = os.path.join(out_dir, "meshes")
        os.makedirs(mesh_dir, exist_ok=True)
    rows = _eval_rows(cfg, samples, voxel, blocks, mesh_dir)
    report = metrics.EvalReport.from_samples(rows)
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            f.write(report.to_json() + "\n")
        with open(os.path.join(out_dir, "report.csv"), "w") as f:
            f.write(report.to_csv())
    return report


def cmd_eval(ckpt_path: str, out_dir: str, overrides: dict, split: str) -> int:
    _, meta = nd.load_checkpoint(ckpt_path)
    cfg = _config_from_checkpoint(meta, overrides)
    out = _fresh_dir(out_dir)
    _dump_effective_config(cfg, out, "eval")
    report = evaluate_checkpoint(ckpt_path, cfg.data_dir, cfg, out, split)
    print(f"eval: iou {report.iou:.4f} chamfer {report.chamfer:.6f} "
          f"vertices {report.vertex_count}")
    return 0


def cmd_ablate(cfg: RunConfig, seeds: list[int]) -> int:
    run_dir = _fresh_dir(cfg.run_dir)
    _dump_effective_config(cfg, run_dir, "ablate")
    lines = ["config,iou,chamfer,vertices"]
    for combo in COMBO_ORDER:
        sampler, unpool = combo.split("+")
        per_seed = []
        for seed in seeds:
            sub = os.path.join(run_dir, f"{sampler}_{unpool}_seed{seed}")
            sub_cfg = dataclasses.replace(
                cfg, sampler=sampler, unpool=unpool, seed=seed, run_dir=sub)
            rc = cmd_train(sub_cfg)
            if rc != 0:
                return rc
            report = evaluate_checkpoint(
                os.path.join(sub, "ckpt_final.ckpt"), cfg.data_dir,
                sub_cfg, None)
            per_seed.append(report)
        lines.append("%s,%r,%r,%d" % (
            combo.upper(),
            statistics.median(r.iou for r in per_seed),
            statistics.median(r.chamfer for r in per_seed),
            round(statistics.median(r.vertex_count for r in per_seed))))
    csv_path = os.path.join(run_dir, "ablation.csv")
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"ablate: wrote {csv_path}")
    return 0


def cmd_export_mesh(ckpt_path: str, volume_path: str, out_path: str,
                    overrides: dict, stage: int | None) -> int:
    _, meta = nd.load_checkpoint(ckpt_path)
    cfg = _config_from_checkpoint(meta, overrides)
    nd.set_default_dtype(np.float64)
    loaded, _ = nd.load_checkpoint(ckpt_path)
    voxel, named, blocks = init_all_params(cfg)
    load_params_into(named, loaded)
    volume = synthdata.load_volume(volume_path)
    nd.reset_tape()
    meshes, _ = meshdecoder.forward(
        Tensor(volume[None]), voxel, blocks,
        cfg.voxel_config(), cfg.mesh_config())
    nd.reset_tape()
    pick = meshes[-1] if stage is None else meshes[stage]
    meshcore.save_obj(out_path, pick.vertices.data, pick.faces)
    print(f"export-mesh: {pick.num_vertices} vertices -> {out_path}")
    return 0


# -- argument plumbing -------------------------------------------------------

_CONFIG_FLAGS = [
    ("--levels", int), ("--init-subdiv", int), ("--base-channels", int),
    ("--feature-width", int), ("--state-width", int),
    ("--neighborhood-size", int), ("--amu-threshold", float),
    ("--sampler", str), ("--unpool", str),
    ("--lambda1", float), ("--lambda2", float), ("--lambda3", float),
    ("--lambda4", float), ("--chamfer-samples", int),
    ("--lr", float), ("--beta1", float), ("--beta2", float),
    ("--adam-eps", float), ("--steps", int), ("--checkpoint-every", int),
    ("--dtype", str), ("--seed", int), ("--eval-seed", int),
    ("--eval-samples", int), ("--count", int), ("--noise-sigma", float),
    ("--n-points", int), ("--ratio", float),
    ("--data-dir", str), ("--run-dir", str),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    for flag, typ in _CONFIG_FLAGS:
        parser.add_argument(flag, type=typ)
    parser.add_argument("--size", type=int, dest="extent",
                        help="cubic volume extent")
    parser.add_argument("--per-stage-regularizers", action="store_const",
                        const=True)


def _collect_overrides(args: argparse.Namespace) -> dict:
    keys = [f.name for f in dataclasses.fields(RunConfig)]
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig().as_dict()
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        known = set(base)
        extra = sorted(set(file_cfg) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        base.update(file_cfg)
    base.update(_collect_overrides(args))
    return RunConfig.from_dict(base)


def _parse_seed_list(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}")
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vox2surf",
        description="voxel-to-surface pipeline: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_flags(p_gen)
    p_gen.add_argument("--workers", type=int, default=1)

    p_train = sub.add_parser("train", help="train on a generated dataset")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")

    p_abl = sub.add_parser("ablate", help="train/eval the four design variants")
    _add_config_flags(p_abl)
    p_abl.add_argument("--seeds", default="0", help="comma-separated seed list")

    p_exp = sub.add_parser("export-mesh", help="run one volume through a checkpoint")
    _add_config_flags(p_exp)
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--volume", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--stage", type=int)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(build_config(args), workers=args.workers)
        if args.command == "train":
            return cmd_train(build_config(args))
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.out,
                            _collect_overrides(args), args.split)
        if args.command == "ablate":
            return cmd_ablate(build_config(args), _parse_seed_list(args.seeds))
        if args.command == "export-mesh":
            return cmd_export_mesh(args.checkpoint, args.volume, args.out,
                                   _collect_overrides(args), args.stage)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
