"""Command-line entry points: data generation, training, sampling, evaluation and ablations."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import CONVENTION_VERSION
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import dump_config, load_config
from .dual_branch import Stage1Trainer, load_stage1, sample_joint
from .errors import VoxsyncError
from .geometry import VIEW_NAMES, GridSpec, build_projection_tables, canonical_views
from .metrics import EvalReport, evaluate_appearance, score_meshes, voxel_iou
from .mv_decoder import (
    DecoderTargets,
    DecoderTrainer,
    LatentFlowModel,
    LatentTrainer,
    SLatEncoder,
    generate_structured_latents,
    load_decoders,
    occupancy_to_box_mesh,
    read_obj,
    write_gaussians,
    write_obj,
)
from .synthetic_data import generate_dataset, load_dataset, sample_dirname, to_uint8


class RunDir:
    """Run directory holding the resolved config, seeds, convention version and an append-only log."""

    def __init__(self, path, cfg, command: str, argv):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, self.path / "config.yaml")
        info = {"command": command, "argv": list(argv), "convention": CONVENTION_VERSION, "seed": cfg.run.seed,
                "data_seeds": {"train": cfg.synthetic_data.train_seeds, "eval": cfg.synthetic_data.eval_seeds},
                "metrics_seed": cfg.metrics.seed}
        (self.path / "run.json").write_text(json.dumps(info, indent=2))
        self._log = (self.path / "log.jsonl").open("a")

    def log(self, record: dict) -> None:
        self._log.write(json.dumps({"time": round(time.time(), 3), **record}) + "\n")
        self._log.flush()

    def __truediv__(self, name):
        return self.path / name


def _onoff(value: str) -> bool:
    return value == "on"


def resolve_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.device is not None:
        overrides["run.device"] = args.device
    if args.sync_attention is not None:
        overrides["dual_branch.sync_attention"] = _onoff(args.sync_attention)
    if args.icp is not None:
        overrides["metrics.icp"] = _onoff(args.icp)
    cfg = load_config(args.config, overrides)
    if cfg.run.device != "cpu":
        raise VoxsyncError(f"device {cfg.run.device!r} is not supported; only 'cpu' is")
    if cfg.run.threads:
        torch.set_num_threads(cfg.run.threads)
    return cfg


def _dataset(cfg, split):
    samples = load_dataset(cfg.synthetic_data.root, split)
    if not samples:
        raise VoxsyncError(f"dataset {cfg.synthetic_data.root} has no {split!r} samples")
    return samples


# ---------------------------------------------------------------- prediction files

def write_prediction(directory, occupancy, color_views, mesh=None, gaussians=None, N=None) -> Path:
    """``occupancy.npy``, one PNG per view (``{view}_color.png``), and optionally ``mesh.obj`` / ``gaussians.vxgs``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "occupancy.npy", np.asarray(occupancy, bool))
    views = np.asarray(color_views)
    if views.dtype != np.uint8:
        views = to_uint8(views)
    for k, name in enumerate(VIEW_NAMES):
        Image.fromarray(views[k]).save(d / f"{name}_color.png")
    if mesh is not None and not mesh.is_empty:
        write_obj(mesh, d / "mesh.obj")
    if gaussians is not None:
        write_gaussians(gaussians, N, d / "gaussians.vxgs")
    return d


def read_prediction(directory):
    d = Path(directory)
    occ = np.load(d / "occupancy.npy")
    views = []
    for name in VIEW_NAMES:
        with Image.open(d / f"{name}_color.png") as im:
            views.append(np.asarray(im.convert("RGB")))
    mesh = read_obj(d / "mesh.obj") if (d / "mesh.obj").exists() else None
    return occ, np.stack(views), mesh


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(cfg, run: RunDir, args) -> int:
    d = cfg.synthetic_data
    seeds = list(d.train_seeds) + [s for s in d.eval_seeds if s not in d.train_seeds]
    manifest = generate_dataset(seeds, d.complexity, d.N, d.V, d.root, d.eval_seeds, d.workers)
    run.log({"command": "gen-data", "samples": len(seeds), "manifest": str(manifest)})
    print(f"wrote {len(seeds)} samples to {d.root}")
    return 0


def cmd_train_stage1(cfg, run: RunDir, args) -> int:
    samples = _dataset(cfg, "train")
    trainer = Stage1Trainer(cfg.dual_branch, samples, seed=cfg.run.seed, log=run.log)
    trainer.train()
    ev = trainer.evaluate()
    run.log({"command": "train-stage1", "iou": ev["iou"], "psnr": ev["psnr"], "ssim": ev["ssim"]})
    path = trainer.save(run / "stage1.pt")
    print(f"stage-1 checkpoint {path}; mean IoU {ev['mean_iou']:.4f}, mean PSNR {ev['mean_psnr']:.2f}")
    return 0


def _save_latent_model(model: LatentFlowModel, path, step):
    return save_checkpoint(path, {"latent": model}, {"stage": "latent", "model": model.config, "step": step})


def _load_latent_model(path) -> LatentFlowModel:
    manifest, state = load_checkpoint(path)
    c = dict(manifest["model"])
    model = LatentFlowModel(c.pop("N"), c.pop("V"), **c)
    restore(model, state, "latent")
    return model.eval()


def cmd_train_decoder(cfg, run: RunDir, args) -> int:
    samples = _dataset(cfg, "train")
    encoder = SLatEncoder(cfg.mv_decoder.d_z, seed=cfg.run.seed)
    latent = LatentTrainer(cfg.mv_decoder, samples, encoder, seed=cfg.run.seed, log=run.log)
    latent.train()
    _save_latent_model(latent.model, run / "latent.pt", latent.step)
    trainer = DecoderTrainer(cfg.mv_decoder, samples, encoder, seed=cfg.run.seed, weights=cfg.losses, log=run.log)
    trainer.train()
    trainer.save(run / "decoder.pt")
    print(f"decoder checkpoints in {run.path}")
    return 0


@torch.no_grad()
def cmd_sample(cfg, run: RunDir, args) -> int:
    if not (args.stage1 and args.decoder and args.latent):
        raise VoxsyncError("sample needs --stage1, --latent and --decoder checkpoints")
    model, ae, _ = load_stage1(args.stage1)
    latent_model = _load_latent_model(args.latent)
    extractor, gs_dec, mesh_dec, manifest = load_decoders(args.decoder)
    if args.input:
        with Image.open(args.input) as im:
            images = {Path(args.input).stem: np.asarray(im.convert("RGB"), np.float32) / 255}
    else:
        images = {sample_dirname(s.seed): v.condition_image for s, v in _dataset(cfg, "eval")}
    N, V = manifest["N"], manifest["V"]
    proj = build_projection_tables(GridSpec(N), canonical_views(extractor.output_size(V)))
    c = cfg.dual_branch
    for i, (name, image) in enumerate(images.items()):
        seed = cfg.run.seed + i
        out = sample_joint(torch.as_tensor(image)[None], c.sample_steps, c.cfg_scale, seed, model, ae)
        occ = out.occupancy[0].numpy()
        views = out.images[0]
        mesh = gs = None
        if occ.any():
            slat = generate_structured_latents(occ, image, seed, latent_model, cfg.mv_decoder.sample_steps,
                                               cfg.mv_decoder.cfg_scale)
            maps = extractor(views)[0]
            gs = gs_dec(slat, maps, proj)
            mesh = mesh_dec(slat, maps, proj).mesh
        write_prediction(run / "samples" / name, occ, views[:, 0].numpy(), mesh, gs, N)
        run.log({"command": "sample", "sample": name, "seed": seed, "active_voxels": int(occ.sum())})
    print(f"wrote {len(images)} samples to {run / 'samples'}")
    return 0


def cmd_evaluate(cfg, run: RunDir, args) -> int:
    if not args.pred:
        raise VoxsyncError("evaluate needs --pred <directory of predictions>")
    m = cfg.metrics
    report = EvalReport()
    for shape, views in _dataset(cfg, "eval" if cfg.synthetic_data.eval_seeds else None):
        name = sample_dirname(shape.seed)
        pdir = Path(args.pred) / name
        if not pdir.exists():
            raise VoxsyncError(f"no prediction for {name} under {args.pred}")
        occ, color, mesh = read_prediction(pdir)
        record = {"iou": voxel_iou(occ, shape.occupancy)}
        psnr, ssim = evaluate_appearance(color.astype(np.float32) / 255, views.color.astype(np.float32) / 255)
        record.update(psnr=psnr, ssim=ssim)
        if mesh is None:
            mesh = occupancy_to_box_mesh(occ)
        geo = score_meshes(mesh, occupancy_to_box_mesh(shape.occupancy), m.n_samples, m.seed, icp=m.icp)
        record.update(chamfer=geo.chamfer, p2s=geo.p2s, nc=geo.nc)
        report.add(name, **record)
        run.log({"command": "evaluate", "sample": name, **record})
    report.write(run.path)
    mean = report.aggregate()
    print(" ".join(f"{k}={v:.4f}" for k, v in mean.items() if isinstance(v, float)))
    return 0


def _table(path, header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return "\n".join(lines)


def cmd_ablate(cfg, run: RunDir, args) -> int:
    samples = _dataset(cfg, "train")
    rows = []
    if args.study == "sync":
        for flag in (True, False):
            trainer = Stage1Trainer(cfg.dual_branch, samples, seed=cfg.run.seed, sync_attention=flag,
                                    log=lambda r, f=flag: run.log({"sync_attention": f, **r}))
            trainer.train()
            ev = trainer.evaluate()
            run.log({"command": "ablate", "sync_attention": flag, "iou": ev["iou"], "psnr": ev["psnr"]})
            rows.append(["on" if flag else "off", f"{ev['mean_iou']:.4f}", f"{ev['mean_psnr']:.2f}"])
        text = _table(run / "ablation.md", ["sync_attention", "mean_iou", "mean_psnr"], rows)
    else:
        held = load_dataset(cfg.synthetic_data.root, "eval")
        if not held:
            raise VoxsyncError("the decoder ablation evaluates on the eval split, which is empty")
        encoder = SLatEncoder(cfg.mv_decoder.d_z, seed=cfg.run.seed)
        latent = LatentTrainer(cfg.mv_decoder, samples, encoder, seed=cfg.run.seed, log=run.log)
        latent.train()
        targets = [DecoderTargets.from_sample(s, v) for s, v in held]
        slats = [generate_structured_latents(t.occupancy, t.cond_image, cfg.run.seed + i, latent.model,
                                             cfg.mv_decoder.sample_steps, cfg.mv_decoder.cfg_scale)
                 for i, t in enumerate(targets)]
        for flag in (True, False):
            trainer = DecoderTrainer(cfg.mv_decoder, samples, encoder, injection=flag, seed=cfg.run.seed,
                                     weights=cfg.losses, log=run.log)
            trainer.train()
            evs = [trainer.evaluate(z, t, cfg.metrics.n_samples, cfg.metrics.seed, cfg.metrics.icp)
                   for z, t in zip(slats, targets)]
            psnr = float(np.mean([e["psnr"] for e in evs]))
            chamfer = float(np.mean([e["chamfer"] for e in evs]))
            run.log({"command": "ablate", "injection": flag, "per_shape": evs})
            rows.append(["on" if flag else "off", f"{psnr:.2f}", f"{chamfer:.5f}"])
        text = _table(run / "ablation.md", ["injection", "mean_psnr", "mean_chamfer"], rows)
    print(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "train-decoder": cmd_train_decoder,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config; defaults apply to missing keys")
        p.add_argument("--run-dir", help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--device")
        p.add_argument("--sync-attention", choices=["on", "off"])
        p.add_argument("--icp", choices=["on", "off"])
        if name == "sample":
            p.add_argument("--stage1", help="stage-1 checkpoint")
            p.add_argument("--latent", help="structured-latent generator checkpoint")
            p.add_argument("--decoder", help="decoder checkpoint")
            p.add_argument("--input", help="condition image; defaults to the eval split's front views")
        if name == "evaluate":
            p.add_argument("--pred", help="directory with one prediction folder per sample")
        if name == "ablate":
            p.add_argument("--study", choices=["sync", "mvgd"], default="sync")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run = RunDir(args.run_dir or Path("runs") / args.command, cfg, args.command, argv)
        torch.manual_seed(cfg.run.seed)
        return COMMANDS[args.command](cfg, run, args)
    except (VoxsyncError, FileNotFoundError) as exc:
        print(f"voxsync {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
