"""Command-line interface: gen-synthetic | fit-pbs | train | render | eval | info.

Every command exits with status 0 on success and prints a JSON summary on
stdout. Failures exit with status 1 and a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .dataset import AvatarDataset
from .mesh import PatchLayout
from .model import AvatarModel, TrainConfig, build_model, evaluate, train
from .pbs import PatchBlendshapeBasis, PbsWeights, solve_sequence
from .splat import Camera
from .synthetic import SyntheticSceneSpec, gen_synthetic


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    return formats.read_json(path) if path else {}


def _parse_frames(text: str | None, n: int) -> list[int]:
    if not text:
        return list(range(n))
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    bad = [t for t in out if not 0 <= t < n]
    if bad:
        raise CliError(f"frame {bad[0]} out of range [0, {n})")
    return out


def cmd_gen_synthetic(args) -> dict:
    cfg = _load_config(args.config)
    scene = dict(cfg.get("scene", cfg))
    if args.seed is not None:
        scene["seed"] = args.seed
    spec = SyntheticSceneSpec.from_json(scene)
    manifest = gen_synthetic(spec, args.out)
    return {"manifest": str(manifest), "frames": spec.frames, "cameras": spec.cameras,
            "patch_count": spec.patch_count, "shape_count": spec.shape_count}


def _read_obj_dir(directory) -> list:
    files = sorted(Path(directory).glob("*.obj"))
    if not files:
        raise CliError(f"no OBJ files in {directory}")
    return [formats.read_obj(f) for f in files]


def cmd_fit_pbs(args) -> dict:
    cfg = _load_config(args.config)
    basis_dir = Path(args.basis)
    if args.layout:
        layout_path = Path(args.layout)
    else:
        layout_path = next((p for p in (basis_dir / "layout.json", basis_dir.parent / "layout.json") if p.exists()),
                           basis_dir / "layout.json")
    if not layout_path.exists():
        raise CliError(f"patch layout not found at {layout_path}; pass --layout")
    layout = PatchLayout.load(layout_path)
    basis = PatchBlendshapeBasis.from_meshes(_read_obj_dir(basis_dir), layout)
    sequence = np.stack([m.vertices for m in _read_obj_dir(args.sequence)])
    frames = _parse_frames(args.frames, len(sequence))
    pbs = cfg.get("pbs", cfg)
    weights = PbsWeights(pbs.get("lambda_ls", 1.0),
                         args.lambda_reg if args.lambda_reg is not None else pbs.get("lambda_reg", 1e-3),
                         args.lambda_o if args.lambda_o is not None else pbs.get("lambda_o", 1e-2))
    t0 = time.time()
    fit = solve_sequence(basis, sequence[frames], weights, max_iter=pbs.get("max_iter", 50), tol=pbs.get("tol", 1e-6))
    seconds = time.time() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_blendweights(out, fit.betas)
    energy_csv = out.with_name(out.stem + "_energy.csv")
    with open(energy_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "total", "e_ls", "e_reg", "e_o", "iterations"])
        for t, e, tr in zip(frames, fit.energies, fit.traces):
            w.writerow([t, repr(e.total), repr(e.ls), repr(e.reg), repr(e.o), len(tr) - 1])
    report = {"blendweights": str(out), "energy_csv": str(energy_csv), "frames": len(frames),
              "patch_count": basis.patch_count, "K": basis.K, "seconds": seconds,
              "lambda": {"ls": weights.ls, "reg": weights.reg, "o": weights.o}}
    if args.truth:
        truth = formats.read_blendweights(args.truth)[frames]
        report["max_abs_error"] = float(np.abs(fit.betas - truth).max())
    return report


def _train_setup(args):
    cfg = _load_config(args.config)
    data = args.data or cfg.get("dataset")
    if not data:
        raise CliError("no dataset given (--data or 'dataset' in the config)")
    if args.config and not Path(data).is_absolute():
        data = str(Path(args.config).parent / data)
    train_cfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_cfg["seed"] = args.seed
        train_cfg.setdefault("model", {})
        train_cfg["model"] = {**train_cfg["model"], "seed": args.seed}
    config = TrainConfig.from_json(train_cfg)
    if getattr(args, "stage", None) is not None:
        if not 0 <= args.stage < len(config.stages):
            raise CliError(f"stage {args.stage} not in schedule of {len(config.stages)} stages")
        config.stages = [[config.stages[args.stage][0], 0]]
    dataset = AvatarDataset.load(data, blendweights=args.blendweights or cfg.get("blendweights"))
    return config, dataset


def cmd_train(args) -> dict:
    config, dataset = _train_setup(args)
    out = Path(args.out)
    if args.checkpoint:
        model, _ = AvatarModel.load(args.checkpoint)
    else:
        model = build_model(dataset, config.model)
    result = train(model, dataset, config, out)
    formats.write_json(out / "train_config.json", config.to_json())
    last = next((r["psnr_val"] for r in reversed(result.log) if r["psnr_val"] != ""), None)
    return {"checkpoint": str(result.checkpoints[-1]), "log": str(out / "log.csv"), "steps": config.iterations,
            "anchors": len(model.anchors), "psnr_val": last, "seconds": result.seconds}


def _cameras(args, dataset: AvatarDataset | None) -> list[Camera]:
    spec = args.camera
    if spec is None:
        if dataset is None:
            raise CliError("no camera given (--camera index or camera JSON file)")
        return dataset.cameras
    if Path(spec).exists():
        data = formats.read_json(spec)
        return [Camera.from_json(c) for c in (data if isinstance(data, list) else [data])]
    if dataset is None:
        raise CliError(f"camera {spec!r} is not a file and no dataset was given")
    idx = [int(i) for i in spec.split(",")]
    for i in idx:
        if not 0 <= i < len(dataset.cameras):
            raise CliError(f"missing camera {i}")
    return [dataset.cameras[i] for i in idx]


def cmd_render(args) -> dict:
    model, _ = AvatarModel.load(args.checkpoint)
    dataset = AvatarDataset.load(args.data, blendweights=args.blendweights) if args.data else None
    if dataset is None:
        raise CliError("render needs --data for the tracked meshes that drive the patch frames")
    beta = dataset.beta
    frames = _parse_frames(args.frames, len(beta))
    cams = _cameras(args, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in frames:
        for ci, cam in enumerate(cams):
            if args.stage is not None:
                f = 2 ** args.stage
                cam = cam.resized(cam.width // f, cam.height // f)
            img = model.render(beta[t], dataset.frames[t], cam)[0].image
            stem = out / f"frame_{t:04d}_cam_{ci:02d}"
            formats.write_png(stem.with_suffix(".png"), img)
            formats.write_raw_image(stem.with_suffix(".raw"), img)
            written.append(str(stem.with_suffix(".png")))
    return {"images": len(written), "out": str(out)}


def cmd_eval(args) -> dict:
    model, _ = AvatarModel.load(args.checkpoint)
    data = args.data
    if not data:
        cfg = formats.read_json(Path(args.checkpoint) / "model.json").get("train_config")
        raise CliError("eval needs --data" if cfg is None else "eval needs --data (dataset path is not stored)")
    dataset = AvatarDataset.load(data, blendweights=args.blendweights)
    out = Path(args.out) if args.out else None
    if out and out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"eval_{args.split}.json"
    report = evaluate(model, dataset, args.split, out, dump_dir=args.dump)
    return {"split": args.split, "psnr": report["psnr"], "ssim": report["ssim"], "views": len(report["views"]),
            "report": str(out) if out else None}


def _container_info(path: Path) -> dict:
    arrays, meta = formats.read_container(path)
    tmp = path.with_name(path.stem + ".roundtrip.tmp")
    try:
        formats.write_container(tmp, arrays, meta)
        identical = tmp.read_bytes() == path.read_bytes()
    finally:
        for p in (tmp, formats.manifest_path(tmp)):
            if p.exists():
                p.unlink()
    return {"path": str(path), "meta": meta, "roundtrip_identical": identical,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
            "arrays": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in arrays.items()}}


def cmd_info(args) -> dict:
    path = Path(args.checkpoint)
    if path.is_dir() and (path / "model.json").exists():
        model, meta = AvatarModel.load(path)
        counts = model.anchors.counts_per_patch()
        containers = [_container_info(p) for p in sorted(path.glob("*.bin"))]
        return {"checkpoint": str(path), "step": meta.get("step"), "anchors": len(model.anchors),
                "patch_count": model.patch_count, "anchors_per_patch": {"min": int(counts.min()),
                                                                         "max": int(counts.max()),
                                                                         "mean": float(counts.mean())},
                "empty_patches": int((counts == 0).sum()),
                "mean_opacity": float(model.anchors.opacity.mean()),
                "parameters": int(sum(m.n_params for m in model.mlps.values())),
                "containers": containers,
                "roundtrip_identical": all(c["roundtrip_identical"] for c in containers)}
    if path.suffix == ".bin":
        return _container_info(path)
    raise CliError(f"{path} is neither a checkpoint directory nor a .bin container")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchavatar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_synthetic)

    f = sub.add_parser("fit-pbs", help="fit patch blendweights to a mesh sequence")
    f.add_argument("--basis", required=True, help="directory of K OBJ scans (first = neutral) + layout.json")
    f.add_argument("--sequence", required=True, help="directory of tracked OBJ frames")
    f.add_argument("--out", required=True, help="blendweight container path")
    f.add_argument("--layout")
    f.add_argument("--config")
    f.add_argument("--frames")
    f.add_argument("--lambda-reg", type=float)
    f.add_argument("--lambda-o", type=float)
    f.add_argument("--truth", help="reference blendweights to report the recovery error against")
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit_pbs)

    t = sub.add_parser("train", help="train an avatar")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--blendweights")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--stage", type=int, help="train only this stage of the schedule")
    t.add_argument("--checkpoint", help="start from this checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render PNG frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--blendweights")
    r.add_argument("--camera", help="camera index list or camera JSON file")
    r.add_argument("--frames")
    r.add_argument("--stage", type=int, help="render at 1/2^stage resolution")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--blendweights")
    e.add_argument("--split", default="heldout", choices=["train", "heldout", "reenact", "all"])
    e.add_argument("--out")
    e.add_argument("--dump", help="directory for raw f32 renders")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="checkpoint or container statistics")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as err:  # every failure becomes one machine-readable line
        sys.stderr.write(json.dumps({"error": type(err).__name__, "command": args.command,
                                     "message": str(err)}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
