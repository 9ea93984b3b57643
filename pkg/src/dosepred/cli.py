"""``dosepred`` command line: phantoms, preprocessing, beam dose, training, prediction, scoring."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dosepred")


class CliError(Exception):
    def __init__(self, msg, code=EXIT_VALIDATION):
        super().__init__(msg)
        self.code = code


# -- run bookkeeping ----------------------------------------------------------------


def sha256_path(path) -> str:
    """Digest of a file, or of every file under a directory (relative names included)."""
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(f for f in p.rglob("*") if f.is_file()
                                           and f.name not in ("manifest.json", ".lock", "FAILED"))
    for f in files:
        h.update(str(f.relative_to(p) if f != p else f.name).encode())
        h.update(b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


@contextmanager
def run_dir(out_dir: Path, stem: str = ""):
    """Lock ``out_dir`` for one invocation and leave a FAILED marker if the body raises."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / f"{stem}.lock"
    failed = out_dir / f"{stem}FAILED" if stem else out_dir / "FAILED"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{out_dir} is locked by another run ({lock})", EXIT_IO) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    failed.unlink(missing_ok=True)
    try:
        yield
    except BaseException as exc:
        failed.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(path: Path, cmd: str, config: dict, seed, inputs: dict, outputs: dict):
    doc = {"tool": "dosepred", "version": __version__, "subcommand": cmd, "config": config,
           "seed": seed, "inputs": {k: str(v) for k, v in inputs.items()},
           "outputs": {k: str(v) for k, v in outputs.items()},
           "input_sha256": {k: sha256_path(v) for k, v in inputs.items()}}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _case_dirs(root) -> list[Path]:
    from .io import list_cases

    root = Path(root)
    if not root.is_dir():
        raise CliError(f"cases directory {root} does not exist", EXIT_IO)
    if (root / "meta.json").exists():
        return [root]
    dirs = list_cases(root)
    if not dirs:
        raise CliError(f"no case_* directories under {root}", EXIT_IO)
    return dirs


def _dims(text) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ, got {text!r}")
    return tuple(parts)


# -- subcommands ---------------------------------------------------------------------


def cmd_phantom(a):
    from .io import write_case
    from .phantom import PerturbSpec, PhantomConfig, generate_case

    if a.n < 1:
        raise CliError("--n must be >= 1")
    cfg = PhantomConfig(seed=a.seed, dims=a.dims)
    pert = PerturbSpec(seed=a.seed + 1)
    out = Path(a.out)
    with run_dir(out):
        for i in range(a.n):
            case, perturbed = generate_case(cfg, i, pert)
            write_case(out, case, perturbed)
            log.info("wrote case %d", i)
        write_manifest(out / "manifest.json", "phantom",
                       {"phantom": asdict(cfg), "perturb": asdict(pert), "n": a.n},
                       a.seed, {}, {"cases": out})


def cmd_preprocess(a):
    from .io import read_case
    from .pipeline import check_variant, preprocess_case, write_prepared

    check_variant(a.variant)
    src = _case_dirs(a.cases)
    out = Path(a.out) if a.out else Path(str(Path(a.cases)).rstrip("/") + f"_prep{a.size}")
    if out.resolve() == Path(a.cases).resolve():
        raise CliError("--out must differ from --cases")
    size = _dims(a.size)
    with run_dir(out):
        for d in src:
            case = read_case(d, "consistent")
            prep = preprocess_case(case, size, a.crop)
            write_prepared(out, prep, a.variant)
            log.info("prepared %s", d.name)
        write_manifest(out / "manifest.json", "preprocess",
                       {"variant": a.variant, "size": list(size),
                        "crop": list(a.crop) if a.crop else None}, None,
                       {"cases": a.cases}, {"prepared": out})


def cmd_beamdose(a):
    from .beamsim import beam_dose
    from .io import read_beams, read_case, write_g3

    d = Path(a.case)
    if not (d / "meta.json").exists():
        raise CliError(f"{d} is not a case directory", EXIT_IO)
    if json.loads((d / "meta.json").read_text()).get("prepared"):
        raise CliError(f"{d} holds a preprocessed CT; run beamdose on raw cases")
    case = read_case(d, a.plan)
    out = Path(a.out) if a.out else d / "beam.g3"
    with run_dir(out.parent, out.name + "."):
        grid = beam_dose(case.ct, case.structures["ptv"], read_beams(d / "beams.json"))
        write_g3(out, grid)
        write_manifest(out.parent / f"{out.name}.manifest.json", "beamdose", {}, None,
                       {"case": d}, {"beam": out})


def _load_json_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file {path} not found", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None


def resolve_train_config(a, n_channels: int, input_size):
    from .net3d import NetConfig
    from .trainer import TrainConfig

    raw = _load_json_config(a.config)
    unknown = set(raw) - {"net", "train"}
    if unknown:
        raise CliError(f"config has unknown sections {sorted(unknown)}; expected 'net' and 'train'")
    tr = dict(raw.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    if set(tr) - known:
        raise CliError(f"unknown train keys {sorted(set(tr) - known)}")
    for key in ("loss", "plan", "variant", "seed", "epochs"):
        v = getattr(a, key, None)
        if v is not None:
            tr[key] = v
    net = dict(raw.get("net", {}))
    if net.get("in_channels", n_channels) != n_channels:
        raise CliError(f"net.in_channels={net['in_channels']} but variant {tr.get('variant')} "
                       f"inputs have {n_channels} channels")
    if "input_size" in net and tuple(net["input_size"]) != tuple(input_size):
        raise CliError(f"net.input_size={net['input_size']} but prepared cases are {input_size}")
    net.update(in_channels=n_channels, input_size=tuple(input_size))
    return NetConfig.from_dict(net), TrainConfig.from_dict(tr)


def cmd_train(a):
    from .io import read_json
    from .pipeline import load_prepared, n_input_channels
    from .trainer import train

    dirs = _case_dirs(a.cases)
    variant = a.variant or read_json(dirs[0] / "meta.json").get("variant")
    if variant is None:
        raise CliError(f"{dirs[0]} is not preprocessed; run preprocess first")
    a.variant = variant
    samples = [load_prepared(d, a.plan, variant) for d in dirs]
    net_cfg, tr_cfg = resolve_train_config(a, n_input_channels(variant),
                                           samples[0].inputs.shape[1:])
    out = Path(a.out)
    with run_dir(out):
        train(samples, net_cfg, tr_cfg, out, resume=a.resume)
        write_manifest(out / "manifest.json", "train",
                       {"net": asdict(net_cfg), "train": asdict(tr_cfg)}, tr_cfg.seed,
                       {"cases": a.cases, **({"config": a.config} if a.config else {})},
                       {"model": out / "model.bin", "loss_log": out / "loss_log.csv"})


def cmd_predict(a):
    from .io import read_case, read_json, write_g3
    from .net3d import load_model

    d = Path(a.case)
    if not Path(a.model).is_file():
        raise CliError(f"model file {a.model} not found", EXIT_IO)
    meta = read_json(d / "meta.json")
    if not meta.get("prepared"):
        raise CliError(f"{d} is not a preprocessed case")
    model, head = load_model(a.model)
    trained_variant = head.get("train", {}).get("variant")
    if trained_variant and trained_variant != meta["variant"]:
        raise CliError(f"model was trained on variant {trained_variant!r} but case {d.name} "
                       f"was prepared as {meta['variant']!r}")
    x = np.load(d / "inputs.npy", allow_pickle=False)
    if x.shape[0] != model.cfg.in_channels:
        raise CliError(f"model expects {model.cfg.in_channels} input channels, case has {x.shape[0]}")
    out = Path(a.out)
    case = read_case(d, next(iter(meta["plans"])))
    with run_dir(out.parent, out.name + "."):
        pred = model.forward(x, train=False)
        if not np.all(np.isfinite(pred)):
            from .trainer import NumericError
            raise NumericError("prediction contains non-finite values")
        write_g3(out, case.ct.with_values(pred.astype(np.float64)))
        write_manifest(out.parent / f"{out.name}.manifest.json", "predict", {}, None,
                       {"model": a.model, "case": d}, {"prediction": out})


def _find_pred(pred_root: Path, case_id: str, plan: str) -> Path:
    for p in (pred_root / f"case_{case_id}.g3", pred_root / f"case_{case_id}" / "pred.g3",
              pred_root / f"case_{case_id}" / f"dose_{plan}.g3"):
        if p.exists():
            return p
    raise CliError(f"no prediction for case {case_id} under {pred_root}", EXIT_IO)


def cmd_score(a):
    from .io import read_case, read_g3
    from .score import aggregate_and_emit, score_case

    pred_root = Path(a.pred)
    if not pred_root.is_dir():
        raise CliError(f"prediction directory {pred_root} does not exist", EXIT_IO)
    reports = []
    out = Path(a.out)
    with run_dir(out):
        for d in _case_dirs(a.real):
            case = read_case(d, a.plan)
            pred = read_g3(_find_pred(pred_root, case.case_id, a.plan))
            body = case.body if a.body_mask else None
            if a.body_mask and body is None:
                raise CliError(f"--body-mask given but {d} has no body.g3")
            structs = {k: m for k, m in case.structures.masks.items() if m.any()}
            reports.append(score_case(case.case_id, pred, case.reference_dose, structs,
                                      case.prescription, body))
        agg = aggregate_and_emit(reports, out, {"plan": a.plan, "body_mask": a.body_mask})
        write_manifest(out / "manifest.json", "score", {"plan": a.plan, "body_mask": a.body_mask},
                       None, {"pred": pred_root, "real": a.real},
                       {"report_csv": out / "report.csv", "report_json": out / "report.json"})
    print(f"dose score {agg['dose_score']['mean']:.4f} +- {agg['dose_score']['std']:.4f} Gy")
    print(f"DVH score  {agg['dvh_score']['mean']:.4f} +- {agg['dvh_score']['std']:.4f} Gy")


def cmd_gradcheck(a):
    from .gradcheck import run

    results = run(a.module)
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    if bad:
        from .trainer import NumericError
        raise NumericError("gradient check failed: " + ", ".join(r.name for r in bad))


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dosepred", description=__doc__)
    p.add_argument("--version", action="version", version=f"dosepred {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("phantom", help="generate synthetic cases with consistent and perturbed plans")
    s.add_argument("--n", type=int, required=True, help="number of cases")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--dims", type=_dims, default=(64, 64, 64), help="grid size N or NX,NY,NZ")
    s.add_argument("--out", required=True, help="output directory for case_<id>/ folders")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="clip, normalise, crop and resample cases; write input stacks")
    s.add_argument("--cases", required=True, help="directory of raw cases")
    s.add_argument("--variant", required=True, choices=("ct_contours", "ct_contours_beam"),
                   help="input channel set")
    s.add_argument("--size", required=True, help="network grid size N or NX,NY,NZ")
    s.add_argument("--crop", type=_dims, default=None,
                   help="crop window in source voxels (default: whole grid)")
    s.add_argument("--out", default=None, help="output directory (default: <cases>_prep<size>)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("beamdose", help="compute the beam-dose channel of one raw case")
    s.add_argument("--case", required=True, help="case directory")
    s.add_argument("--plan", default="consistent", help="plan tag used to load the case")
    s.add_argument("--out", default=None, help="output .g3 (default: <case>/beam.g3)")
    s.set_defaults(func=cmd_beamdose)

    s = sub.add_parser("train", help="train a dose-prediction network on preprocessed cases")
    s.add_argument("--cases", required=True, help="directory of preprocessed cases")
    s.add_argument("--loss", choices=("mae", "mae_dvh"), default=None, help="training loss")
    s.add_argument("--plan", choices=("consistent", "perturbed"), default="consistent",
                   help="which reference plan to learn")
    s.add_argument("--variant", choices=("ct_contours", "ct_contours_beam"), default=None,
                   help="must match the preprocessed cases (default: read from them)")
    s.add_argument("--config", default=None, help='JSON file with "net" and "train" sections')
    s.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    s.add_argument("--epochs", type=int, default=None, help="total epochs (overrides config)")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="eval-mode forward pass on one preprocessed case")
    s.add_argument("--model", required=True, help="checkpoint file")
    s.add_argument("--case", required=True, help="preprocessed case directory")
    s.add_argument("--out", required=True, help="output .g3 file")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("score", help="dose score, DVH score and clinical metric reports")
    s.add_argument("--pred", required=True,
                   help="predictions: case_<id>.g3 files or case dirs with pred.g3 / dose_<plan>.g3")
    s.add_argument("--real", required=True, help="preprocessed reference cases")
    s.add_argument("--plan", default="consistent", help="reference plan tag")
    s.add_argument("--body-mask", action="store_true", help="restrict the dose score to the body")
    s.add_argument("--out", required=True, help="report directory")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("gradcheck", help="finite-difference and adjoint gradient checks")
    s.add_argument("--module", choices=("dvh", "net3d", "all"), default="all")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .io import VolumeFormatError
    from .trainer import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
