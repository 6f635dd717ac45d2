"""Command-line entry point: ``depthsdf <command> [options]``.

Exit status is 0 on success, 2 on bad usage and 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import diffcore as dc
from .config import MetricsLog, load_config, seeds_for, substream_seed, write_manifest

log = logging.getLogger("depthsdf")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config; merged over the built-in defaults")
    p.add_argument("--seed", type=int, help="root seed (default from config)")
    p.add_argument("--threads", type=int, help="CPU threads (default from config)")
    p.add_argument("--out", required=True, help="output directory (or file, where noted)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="depthsdf", description="Depth-guided implicit surface reconstruction.")
    ap.add_argument("--version", action="version", version=f"depthsdf {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--split", default="all", choices=["all", "train", "test", "wild"])
    p.add_argument("--count", type=int, help="samples per split (default from config)")
    p.add_argument("--res", type=int)

    p = sub.add_parser("train-estimators", parents=[common], help="train the normal and depth estimators")
    p.add_argument("--data", required=True, help="training split directory")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-pifu", parents=[common], help="supervised implicit-field training")
    p.add_argument("--input-mode", required=True, choices=["I", "N", "D", "IN", "ID", "ND", "IND"])
    p.add_argument("--data", required=True, help="training split directory")
    p.add_argument("--test", help="test split directory for IoU probes")
    p.add_argument("--estimators", help="condition on estimated rasters from this checkpoint")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune-self", parents=[common], help="depth-guided self-supervised fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wild", required=True, help="wild split directory")
    p.add_argument("--synthetic", help="training split mixed in as a supervised term")
    p.add_argument("--estimators", help="estimator checkpoint; omit with --gt-depth")
    p.add_argument("--gt-depth", action="store_true", help="use ground-truth depth (oracle mode)")
    p.add_argument("--lambda-surf", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epochs", type=int)

    for name, hlp in (("reconstruct", "extract a mesh (--out is an .obj path)"),
                      ("render-depth", "sphere-trace a depth map (--out is an .ntf path)")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", help="dataset directory holding the input sample")
        p.add_argument("--index", type=int, default=0)
        p.add_argument("--image", help="NTF1 image (3 x H x W)")
        p.add_argument("--normal", help="NTF1 normal map (4 x H x W)")
        p.add_argument("--depth", help="NTF1 depth map (2 x H x W)")
        p.add_argument("--estimators", help="derive normal/depth from the image with these estimators")
        if name == "reconstruct":
            p.add_argument("--res", type=int, help="grid resolution")

    p = sub.add_parser("eval", parents=[common], help="CD / P2S / IoU of a mesh; prints one JSON record")
    p.add_argument("--pred", required=True, help="predicted .obj")
    p.add_argument("--gt", required=True, help="reference .obj or .shape.json")
    p.add_argument("--sampler", choices=["uniform", "near_surface"])
    p.add_argument("--n", type=int, help="IoU sample count")

    p = sub.add_parser("ablate-inputs", parents=[common], help="train every input mode; writes ablation.csv")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--modes", nargs="+", choices=["I", "N", "D", "IN", "ID", "ND", "IND"])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("repro", parents=[common], help="full pipeline to the held-out metrics")
    p.add_argument("--reuse", action="store_true", help="keep finished stages found in --out")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> dict:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    return load_config(args.config, over)


def _camera(shape_hw, cfg):
    from .geometry import OrthoCamera

    return OrthoCamera(int(shape_hw[1]), int(shape_hw[0]), cfg["data"]["half_extent"])


def _input_sample(args, cfg):
    """(image, mask, camera, NormalMap|None, DepthMap|None) from a dataset entry or raster files."""
    from .diffcore import read_ntf
    from .geometry import DepthMap, NormalMap
    from .synthdata import Dataset

    if args.data:
        s = Dataset(args.data)[args.index]
        return s.image, s.mask, s.camera, s.normal, s.depth
    src = args.depth or args.normal or args.image
    if src is None:
        raise ValueError("give --data, or raster files via --image/--normal/--depth")
    cam = _camera(read_ntf(src).shape[1:], cfg)
    nm = NormalMap.load(args.normal, cam) if args.normal else None
    dm = DepthMap.load(args.depth, cam) if args.depth else None
    image = np.moveaxis(read_ntf(args.image), 0, -1).astype(np.float64) if args.image else None
    if dm is not None:
        mask = dm.mask
    elif nm is not None:
        mask = nm.mask
    elif image is not None:
        mask = image.max(-1) > 0
    return image, mask, cam, nm, dm


def _conditioning(args, cfg, field):
    from .estimators import estimate_depth, estimate_normal, load_estimators
    from .pifu import build_conditioning

    image, mask, cam, nm, dm = _input_sample(args, cfg)
    if args.estimators:
        if image is None:
            raise ValueError("--estimators needs an image")
        nnet, dnet = load_estimators(args.estimators)
        nm = estimate_normal(nnet, image, mask, cam)
        dm = estimate_depth(dnet, image, nm)
    cond = build_conditioning(field.input_mode, mask, image, nm, dm)
    return cond, mask, cam


def _file_out(path) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, mlog):
    from .experiments import generate_splits
    from .synthdata import generate_dataset

    if args.res:
        cfg["data"]["resolution"] = args.res
    if args.count is not None:
        cfg["data"]["counts"] = {k: args.count for k in cfg["data"]["counts"]}
    if args.split == "all":
        seeds = generate_splits(cfg, args.out, cfg["threads"])
    else:
        seed = substream_seed(substream_seed(cfg["seed"], "dataset"), args.split)
        generate_dataset(cfg["data"]["counts"][args.split], args.split, cfg["data"]["resolution"], seed,
                         args.out, cfg["threads"], cfg["data"]["half_extent"])
        seeds = {args.split: seed}
    mlog({"stage": "data", "split_seeds": seeds})
    return {"split_seeds": seeds}


def cmd_train_estimators(args, cfg, mlog):
    from .estimators import train_estimators
    from .synthdata import Dataset

    ecfg = dict(cfg["estimators"], seed=seeds_for(cfg["seed"])["init"])
    if args.epochs is not None:
        ecfg["epochs"] = args.epochs
    res = train_estimators(Dataset(args.data), ecfg, args.out, mlog)
    return {"normal_loss": res["normal_curve"][-1], "depth_loss": res["depth_curve"][-1]}


def _rasters(est_dir, dataset):
    from .estimators import load_estimators, predict_rasters

    nnet, dnet = load_estimators(est_dir)
    return [predict_rasters(nnet, dnet, s) for s in dataset]


def cmd_train_pifu(args, cfg, mlog):
    from .pifu import ConditionedSet, train_pifu_supervised
    from .synthdata import Dataset

    mode = args.input_mode
    train = Dataset(args.data)
    tset = ConditionedSet(train, mode, _rasters(args.estimators, train) if args.estimators else None)
    test = ConditionedSet(Dataset(args.test), mode) if args.test else None
    pcfg = {k: v for k, v in cfg["pifu"].items() if k not in ("input_mode", "conditioning")}
    pcfg["seed"] = seeds_for(cfg["seed"])["training"]
    if args.epochs is not None:
        pcfg["epochs"] = args.epochs
    res = train_pifu_supervised(tset, mode, pcfg, test, args.out, mlog)
    return {k: v for k, v in res["history"][-1].items() if k != "stage"}


def cmd_finetune_self(args, cfg, mlog):
    from .pifu import ConditionedSet, load_field
    from .selfsup import finetune_self
    from .synthdata import Dataset

    field = load_field(args.ckpt)
    mode = field.input_mode
    wild = Dataset(args.wild)
    if args.gt_depth:
        wset, depth = ConditionedSet(wild, mode), [s.depth for s in wild]
    else:
        if not args.estimators:
            raise ValueError("finetune-self needs --estimators or --gt-depth")
        r = _rasters(args.estimators, wild)
        wset, depth = ConditionedSet(wild, mode, r), [dm for _, dm in r]
    synth = ConditionedSet(Dataset(args.synthetic), mode) if args.synthetic else None
    fcfg = {k: v for k, v in cfg["finetune"].items() if k != "depth_source"}
    fcfg["seed"] = seeds_for(cfg["seed"])["finetune"]
    for flag, key in ((args.lambda_surf, "lambda_surf"), (args.sigma, "sigma"), (args.epochs, "epochs")):
        if flag is not None:
            fcfg[key] = flag
    field.train()
    res = finetune_self(field, wset, depth, fcfg, synthetic=synth, out_dir=args.out, log_fn=mlog)
    return {k: v for k, v in res["history"][-1].items() if k != "stage"}


def cmd_reconstruct(args, cfg, mlog):
    from .meshing import reconstruct
    from .pifu import load_field

    field = load_field(args.ckpt)
    cond, mask, _ = _conditioning(args, cfg, field)
    res = args.res or cfg["reconstruct"]["resolution"]
    _, stats = reconstruct(field, cond, res, args.out, mask)
    mlog({"stage": "reconstruct", "resolution": res, **stats})
    return stats


def cmd_render_depth(args, cfg, mlog):
    from .pifu import load_field
    from .render import RayMarchConfig, render_depth

    field = load_field(args.ckpt)
    cond, _, cam = _conditioning(args, cfg, field)
    dm, conv = render_depth(field, cond, cam, RayMarchConfig(**cfg["finetune"]["march"]))
    dm.save(args.out)
    rec = {"stage": "render", "converged": int(conv.sum()), "pixels": int(conv.size)}
    mlog(rec)
    return rec


def cmd_eval(args, cfg, mlog):
    from .experiments import gt_mesh
    from .geometry import TriMesh
    from .metrics import evaluate
    from .synthdata import AnalyticShape

    ecfg = cfg["eval"]
    pred = TriMesh.load_obj(args.pred)
    if args.gt.endswith(".json"):
        with open(args.gt) as fh:
            gt = AnalyticShape.from_dict(json.load(fh))
        ref = gt_mesh(gt, ecfg["gt_mesh_resolution"])
    else:
        gt = ref = TriMesh.load_obj(args.gt)
    seed = cfg["seed"] if args.seed is not None else substream_seed(cfg["seed"], "eval")
    rec = evaluate(pred, gt, ecfg["n_surface"], args.sampler or ecfg["sampler"], args.n or ecfg["n"],
                   seed, gt_mesh=ref)
    rec["watertight"] = pred.is_watertight()
    print(json.dumps(rec, sort_keys=True))
    mlog({"stage": "eval", **rec})
    return rec


def cmd_ablate_inputs(args, cfg, mlog):
    from .experiments import ablate_inputs
    from .synthdata import Dataset

    pcfg = {k: v for k, v in cfg["pifu"].items() if k not in ("input_mode", "conditioning")}
    pcfg["seed"] = seeds_for(cfg["seed"])["training"]
    if args.epochs is not None:
        pcfg["epochs"] = args.epochs
    rows = ablate_inputs(Dataset(args.train), Dataset(args.test), args.modes or cfg["ablation"]["modes"],
                         pcfg, args.out, mlog)
    return {"rows": rows}


def cmd_repro(args, cfg, mlog):
    from .experiments import repro

    return repro(cfg, args.out, mlog, reuse=args.reuse)


COMMANDS = {"gen-data": cmd_gen_data, "train-estimators": cmd_train_estimators, "train-pifu": cmd_train_pifu,
            "finetune-self": cmd_finetune_self, "reconstruct": cmd_reconstruct, "render-depth": cmd_render_depth,
            "eval": cmd_eval, "ablate-inputs": cmd_ablate_inputs, "repro": cmd_repro}
FILE_OUTPUTS = ("reconstruct", "render-depth")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        dc.configure(cfg["threads"])
        if args.command in FILE_OUTPUTS:
            run_dir = _file_out(args.out)
            stem = os.path.basename(args.out)
            log_name, manifest_name = f"{stem}.metrics.jsonl", f"{stem}.manifest.json"
        else:
            run_dir = args.out
            os.makedirs(run_dir, exist_ok=True)
            log_name, manifest_name = "metrics.jsonl", "run_manifest.json"
        mlog = MetricsLog(os.path.join(run_dir, log_name))
        result = COMMANDS[args.command](args, cfg, mlog)
        write_manifest(run_dir, args.command, cfg, {"argv": list(argv if argv is not None else sys.argv[1:])},
                       manifest_name)
        if args.command != "eval":
            log.info("%s done: %s", args.command, json.dumps(result, sort_keys=True, default=str)[:500])
        return 0
    except Exception as exc:  # noqa: BLE001
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
