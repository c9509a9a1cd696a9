"""Command-line entry point: synth, train, eval, fuse and erf subcommands.

Configuration layers, lowest to highest precedence: built-in defaults, a
JSON config file (``--config``), then command-line flags.  Each run is
staged in a hidden sibling directory and renamed into place only when
every artifact has been written.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .cube import HsiCube
from .data import Dataset, Sample, SceneSpec, make_pair, split_tags, synth_scene
from .erf import TAGS, erf_suite, export, fragment_config
from .hsc import read_cube, read_manifest, write_cube, write_manifest
from .losses import LossConfig
from .metrics import evaluate
from .model import HyFusion, ModelConfig
from .resample import BlurOperator, SpectralResponse, upsample_bilinear
from .tensor import no_grad
from .train import TrainConfig, restore, train

log = logging.getLogger("hyfusion")

SECTIONS = ("scene", "data", "model", "train", "loss", "erf")
DATA_DEFAULTS = {"n": 10, "ratios": [0.8, 0.1, 0.1], "scale": 4, "msi_bands": 4, "blur_sigma": None,
                 "response_csv": None}
ERF_DEFAULTS = {"extent": 64, "samples": 32, "tags": list(TAGS), "threshold": 1e-6, "channels": 8,
                "growth": 4, "heads": 2, "window": 4, "shift": 2}


class CliError(Exception):
    """A failure reported to the user with a message and a nonzero exit code."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}; expected a subset of {list(SECTIONS)}")
    return cfg


def _merge(defaults: dict, overrides: dict, section: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise CliError(f"unknown keys in config section '{section}': {sorted(unknown)}")
    return {**defaults, **overrides}


def _build(cls, defaults: dict, overrides: dict, section: str):
    merged = _merge(defaults, overrides, section)
    try:
        return cls.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid '{section}' configuration: {e}")


@contextlib.contextmanager
def run_directory(out, force: bool):
    """Stage outputs in a temporary sibling; move into place only on success."""
    out = Path(out)
    if out.exists() and not force and (not out.is_dir() or any(out.iterdir())):
        raise CliError(f"output {out} exists and is not empty; pass --force to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    tmp.rename(out)


def write_run_record(outdir: Path, command: str, seed: int, config: dict, inputs: dict[str, str]) -> None:
    record = {"command": command, "version": __version__, "seed": seed, "config": config,
              "inputs": {k: inputs[k] for k in sorted(inputs)}}
    (outdir / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _config_inputs(args) -> dict[str, str]:
    return {str(args.config): sha256(args.config)} if args.config else {}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    file_cfg = load_config(args.config)
    data = _merge(DATA_DEFAULTS, file_cfg.get("data", {}), "data")
    if args.n is not None:
        data["n"] = args.n
    if args.bands is not None:
        data["msi_bands"] = args.bands
    scene_over = dict(file_cfg.get("scene", {}))
    if args.seed is not None:
        scene_over["seed"] = args.seed
    spec = _build(SceneSpec, SceneSpec().to_dict(), scene_over, "scene")
    if data["n"] < 1:
        raise CliError("n must be at least 1")
    try:
        tags = split_tags(data["n"], tuple(data["ratios"]))
        blur = BlurOperator(data["scale"], data["blur_sigma"])
        if data["response_csv"]:
            response = SpectralResponse.from_csv(data["response_csv"])
        else:
            response = SpectralResponse.block_average(spec.bands, data["msi_bands"])
    except (ValueError, OSError) as e:
        raise CliError(str(e))
    if response.hsi_bands != spec.bands:
        raise CliError(f"spectral response expects {response.hsi_bands} bands, scenes have {spec.bands}")
    inputs = _config_inputs(args)
    if data["response_csv"]:
        inputs[str(data["response_csv"])] = sha256(data["response_csv"])

    with run_directory(args.out, args.force) as out:
        (out / "cubes").mkdir()
        records = []
        for i in range(data["n"]):
            s = SceneSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i})
            y = synth_scene(s)
            x_h, x_m = make_pair(y, blur, response)
            rec = {"index": i, "seed": s.seed, "split": tags[i]}
            for key, cube in (("y", y), ("x_h", x_h), ("x_m", x_m)):
                rel = f"cubes/{i:04d}_{key}.hsc"
                write_cube(cube, out / rel)
                rec[key] = rel
            records.append(rec)
        write_manifest(records, out / "manifest.jsonl")
        response.to_csv(out / "response.csv")
        write_run_record(out, "synth", spec.seed, {"scene": spec.to_dict(), "data": data}, inputs)
    log.info("wrote %d samples to %s", data["n"], args.out)


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def load_dataset(root) -> tuple[Dataset, dict[str, str]]:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise CliError(f"no manifest.jsonl in dataset directory {root}")
    digests = {str(manifest): sha256(manifest)}
    samples = []
    for rec in read_manifest(manifest):
        arrays = {}
        for key in ("x_h", "x_m", "y"):
            path = root / rec[key]
            if not path.is_file():
                raise CliError(f"manifest references missing file {path}")
            digests[str(path)] = sha256(path)
            arrays[key] = read_cube(path).values.astype(np.float64)
        samples.append(Sample(arrays["x_h"], arrays["x_m"], arrays["y"], rec.get("seed", 0), rec["split"]))
    if not samples:
        raise CliError(f"dataset {root} is empty")
    return Dataset(samples), digests


def load_checkpoint(path) -> tuple[Checkpoint, dict[str, str]]:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise CliError(f"{path} is not a checkpoint directory (missing manifest.json)")
    try:
        ckpt = Checkpoint.load(path)
    except (ValueError, KeyError, OSError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}")
    digests = {str(path / n): sha256(path / n) for n in ("manifest.json", "blob.f64")}
    return ckpt, digests


def _model_config(file_cfg: dict, args, bands: int, msi_bands: int) -> ModelConfig:
    defaults = ModelConfig.desk(bands=bands, msi_bands=msi_bands).to_dict()
    over = dict(file_cfg.get("model", {}))
    if getattr(args, "bands", None) is not None:
        over["msi_bands"] = args.bands
    cfg = _build(ModelConfig, defaults, over, "model")
    if (cfg.bands, cfg.msi_bands) != (bands, msi_bands):
        raise CliError(f"model expects {cfg.bands}/{cfg.msi_bands} bands but the data has {bands}/{msi_bands}")
    return cfg


def _model_from(ckpt: Checkpoint | None, file_cfg: dict, args, bands: int, msi_bands: int) -> HyFusion:
    if ckpt is None:
        cfg = _model_config(file_cfg, args, bands, msi_bands)
        return HyFusion(cfg, seed=args.seed if args.seed is not None else 0)
    cfg = ModelConfig.from_dict(ckpt.model_config)
    if (cfg.bands, cfg.msi_bands) != (bands, msi_bands):
        raise CliError(f"checkpoint model expects {cfg.bands}/{cfg.msi_bands} bands "
                       f"but the inputs have {bands}/{msi_bands}")
    model, _ = restore(ckpt)
    return model


# ---------------------------------------------------------------------------
# train / eval / fuse / erf
# ---------------------------------------------------------------------------

def cmd_train(args) -> None:
    file_cfg = load_config(args.config)
    data, digests = load_dataset(args.data)
    digests.update(_config_inputs(args))
    first = data[0]
    train_over = dict(file_cfg.get("train", {}))
    for key in ("seed", "fraction", "epochs"):
        if getattr(args, key) is not None:
            train_over[key] = getattr(args, key)
    tcfg = _build(TrainConfig, TrainConfig().to_dict(), train_over, "train")
    lcfg = _build(LossConfig, LossConfig().to_dict(), file_cfg.get("loss", {}), "loss")
    resume = None
    if args.resume:
        resume, ck_digests = load_checkpoint(args.resume)
        digests.update(ck_digests)
        model = _model_from(resume, file_cfg, args, first.y.shape[0], first.x_m.shape[0])
    else:
        mcfg = _model_config(file_cfg, args, first.y.shape[0], first.x_m.shape[0])
        model = HyFusion(mcfg, seed=tcfg.seed)
    train_set, val_set = data.split("train"), data.split("val")
    if len(train_set) == 0:
        raise CliError("dataset has no 'train' samples")
    with run_directory(args.out, args.force) as out:
        result = train(model, train_set, tcfg, lcfg, val_set, resume=resume,
                       log_path=out / "train_log.jsonl", ckpt_dir=out / "checkpoints")
        result.last.save(out / "checkpoints" / "last")
        (out / "train_log.jsonl").touch()
        write_run_record(out, "train", tcfg.seed,
                         {"model": model.cfg.to_dict(), "train": tcfg.to_dict(), "loss": lcfg.to_dict()}, digests)
    log.info("trained %d epochs; best validation PSNR %.3f dB", tcfg.epochs, result.best_val_psnr)


def _mean_report(reports: list) -> dict:
    keys = ("psnr_db", "sam_deg", "rmse", "ergas")
    d = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    d["data_peak"] = float(max(r.data_peak for r in reports))
    d["scale"] = reports[0].scale
    d["sam_excluded"] = int(sum(r.sam_excluded for r in reports))
    if np.isinf(d["psnr_db"]):
        d["psnr_db"] = "inf"
    return d


def cmd_eval(args) -> None:
    file_cfg = load_config(args.config)
    data, digests = load_dataset(args.data)
    digests.update(_config_inputs(args))
    ckpt = None
    if args.checkpoint:
        ckpt, ck_digests = load_checkpoint(args.checkpoint)
        digests.update(ck_digests)
    subset = data.split(args.split)
    if len(subset) == 0:
        raise CliError(f"dataset has no '{args.split}' samples")
    first = subset[0]
    model = _model_from(ckpt, file_cfg, args, first.y.shape[0], first.x_m.shape[0])
    scale = model.cfg.scale
    reports, baselines, per_sample = [], [], []
    with no_grad():
        for s in subset:
            y_star = model(s.x_h, s.x_m).y.data[0]
            rep = evaluate(s.y, y_star, scale)
            base = evaluate(s.y, upsample_bilinear(s.x_h, scale), scale)
            reports.append(rep)
            baselines.append(base)
            per_sample.append({"seed": s.seed, "metrics": rep.to_json_dict()})
    result = {"split": args.split, "n": len(subset), "metrics": _mean_report(reports),
              "bilinear_baseline": _mean_report(baselines), "samples": per_sample}
    with run_directory(args.out, args.force) as out:
        (out / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        write_run_record(out, "eval", ckpt.seed if ckpt else (args.seed or 0),
                         {"model": model.cfg.to_dict(), "split": args.split}, digests)
    print(json.dumps(result["metrics"], sort_keys=True))


def cmd_fuse(args) -> None:
    file_cfg = load_config(args.config)
    digests = _config_inputs(args)
    try:
        x_h, x_m = read_cube(args.xh), read_cube(args.xm)
    except FileNotFoundError as e:
        raise CliError(f"input not found: {e.filename}")
    digests[str(args.xh)] = sha256(args.xh)
    digests[str(args.xm)] = sha256(args.xm)
    ckpt = None
    if args.checkpoint:
        ckpt, ck_digests = load_checkpoint(args.checkpoint)
        digests.update(ck_digests)
    model = _model_from(ckpt, file_cfg, args, x_h.bands, x_m.bands)
    try:
        with no_grad():
            y = model(x_h, x_m).y.data[0]
    except ValueError as e:
        raise CliError(str(e))
    cube = HsiCube(y, min(0.0, float(y.min())), max(1.0, float(y.max())), x_h.wavelengths)
    with run_directory(args.out, args.force) as out:
        write_cube(cube, out / "fused.hsc")
        write_run_record(out, "fuse", ckpt.seed if ckpt else (args.seed or 0),
                         {"model": model.cfg.to_dict()}, digests)
    log.info("fused cube %s written", "x".join(str(v) for v in cube.shape))


def cmd_erf(args) -> None:
    file_cfg = load_config(args.config)
    erf = _merge(ERF_DEFAULTS, file_cfg.get("erf", {}), "erf")
    if args.tags:
        erf["tags"] = args.tags
    bad = set(erf["tags"]) - set(TAGS)
    if bad:
        raise CliError(f"unknown ERF configurations {sorted(bad)}; expected a subset of {list(TAGS)}")
    seed = args.seed if args.seed is not None else 0
    try:
        cfg = fragment_config(erf["channels"], erf["growth"], erf["heads"], erf["window"], erf["shift"])
    except ValueError as e:
        raise CliError(f"invalid 'erf' configuration: {e}")
    maps = erf_suite(erf["extent"], erf["samples"], seed, cfg, erf["threshold"], tuple(erf["tags"]))
    with run_directory(args.out, args.force) as out:
        stats = export(maps, out)
        write_run_record(out, "erf", seed, {"erf": erf}, _config_inputs(args))
    for tag in erf["tags"]:
        print(f"{tag}: support_area={stats[tag]['support_area']} radius_p90={stats[tag]['radius_p90']:.3f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hyfusion {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="run directory to create")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--bands", type=int, choices=(4, 6), help="multispectral band count")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model on a synthetic dataset"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fraction", type=float, help="fraction of the training split to use")
    p.add_argument("--epochs", type=int)
    p.add_argument("--bands", type=int, choices=(4, 6))
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset split"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--bands", type=int, choices=(4, 6))
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("fuse", help="fuse one LR-HSI / HR-MSI pair"))
    p.add_argument("--xh", type=Path, required=True, help="low-resolution hyperspectral cube")
    p.add_argument("--xm", type=Path, required=True, help="high-resolution multispectral cube")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--bands", type=int, choices=(4, 6))
    p.set_defaults(func=cmd_fuse)

    p = common(sub.add_parser("erf", help="effective receptive field maps"))
    p.add_argument("--tags", nargs="+", help="configurations to measure (a, b, c)")
    p.set_defaults(func=cmd_erf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as e:
        print(f"hyfusion {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, FloatingPointError) as e:
        print(f"hyfusion {args.command}: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
