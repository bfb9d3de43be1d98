"""Command-line surface: phantom generation, batch runs, evaluation, reports.

Configuration lives in a single INI file (sections documented in the README)
and can be pointed at with ``--config`` or the ``AIRSEG_CONFIG`` environment
variable; command-line flags always win over file values. Output files are
written atomically (temp + rename).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import glob as globmod
import io
import json
import os
import shlex
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from airseg.backend import BackendDescriptor
from airseg.cascade import CascadeConfig, run_cascade
from airseg.metrics import (
    METRIC_NAMES,
    aggregate,
    evaluate_case,
    render_overlay,
)
from airseg.phantom import PhantomSpec, generate_phantom
from airseg.volume import Volume, read_mask, read_volume, write_volume

ENV_CONFIG = "AIRSEG_CONFIG"
VOLUME_SUFFIXES = (".nii", ".nii.gz", ".raw")
ROLE_SUFFIXES = ("_img", "_gt", "_pred")


@dataclass
class RunConfig:
    cascade: CascadeConfig
    coarse_backend: BackendDescriptor
    fine_backend: BackendDescriptor
    phantom: PhantomSpec
    workers: int = 1
    input: str | None = None
    out: str | None = None


def default_config() -> RunConfig:
    return RunConfig(
        cascade=CascadeConfig(),
        coarse_backend=BackendDescriptor.region_grow(),
        fine_backend=BackendDescriptor.region_grow(),
        phantom=PhantomSpec(),
    )


def _triple(text: str, cast) -> tuple:
    parts = text.split()
    if len(parts) != 3:
        raise ValueError(f"expected 3 whitespace-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _backend_from_section(cp: configparser.ConfigParser, section: str) -> BackendDescriptor:
    kind = cp.get(section, "kind")
    if kind == "region_grow":
        seed = None
        if cp.has_option(section, "seed"):
            seed = _triple(cp.get(section, "seed"), int)
        return BackendDescriptor.region_grow(
            hu_low=cp.getfloat(section, "hu_low", fallback=-1100.0),
            hu_high=cp.getfloat(section, "hu_high", fallback=-900.0),
            max_voxels=cp.getint(section, "max_voxels", fallback=2_000_000),
            seed=seed,
        )
    if kind == "oracle_file":
        return BackendDescriptor.oracle(cp.get(section, "path"))
    if kind == "external":
        return BackendDescriptor.external(shlex.split(cp.get(section, "command")))
    raise ValueError(f"[{section}] unknown backend kind {kind!r}")


def load_config(path: str | None = None) -> RunConfig:
    """Parse the INI config; no path means env var, then built-in defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    rc = default_config()
    if not path:
        return rc
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")

    if cp.has_section("cascade"):
        s = cp["cascade"]
        rc.cascade = CascadeConfig(
            coarse_spacing=_triple(s.get("coarse_spacing", "3.0 3.0 3.0"), float),
            prob_threshold=s.getfloat("prob_threshold", 0.5),
            margin_mm=s.getfloat("margin_mm", 8.0),
            patch_dims=_triple(s.get("patch_dims", "64 64 64"), int),
            stride=_triple(s.get("stride", "32 32 32"), int),
            blend_sigma_frac=s.getfloat("blend_sigma_frac", 0.125),
            connectivity=s.getint("connectivity", 26),
            keep_lcc=s.getboolean("keep_lcc", True),
        )
    if cp.has_section("coarse_backend"):
        rc.coarse_backend = _backend_from_section(cp, "coarse_backend")
    if cp.has_section("fine_backend"):
        rc.fine_backend = _backend_from_section(cp, "fine_backend")
    if cp.has_section("phantom"):
        s = cp["phantom"]
        rc.phantom = PhantomSpec(
            grid_dims=_triple(s.get("grid_dims", "128 128 128"), int),
            spacing=_triple(s.get("spacing", "1.0 1.0 1.0"), float),
            depth=s.getint("depth", 4),
            trachea_radius=s.getfloat("trachea_radius", 5.0),
            trachea_length=s.getfloat("trachea_length", 28.0),
            radius_ratio=s.getfloat("radius_ratio", 0.79),
            length_ratio=s.getfloat("length_ratio", 0.8),
            branch_angle=s.getfloat("branch_angle", 35.0),
            lumen_hu=s.getfloat("lumen_hu", -1000.0),
            wall_hu=s.getfloat("wall_hu", -200.0),
            lung_hu=s.getfloat("lung_hu", -850.0),
            body_hu=s.getfloat("body_hu", 40.0),
            noise_sigma=s.getfloat("noise_sigma", 20.0),
            rng_seed=s.getint("rng_seed", 0),
        )
    if cp.has_section("run"):
        rc.workers = cp.getint("run", "workers", fallback=1)
    if cp.has_section("io"):
        rc.input = cp.get("io", "input", fallback=None)
        rc.out = cp.get("io", "out", fallback=None)
    return rc


def _backend_section_lines(desc: BackendDescriptor) -> list[str]:
    lines = [f"kind = {desc.kind}"]
    if desc.kind == "region_grow":
        p = desc.grow_params()
        lines += [
            f"hu_low = {p.hu_low}",
            f"hu_high = {p.hu_high}",
            f"max_voxels = {p.max_voxels}",
        ]
        if p.seed is not None:
            lines.append("seed = {} {} {}".format(*p.seed))
    elif desc.kind == "oracle_file":
        lines.append(f"path = {desc.params['path']}")
    else:
        lines.append(f"command = {shlex.join(desc.params['command'])}")
    return lines


def dump_config(rc: RunConfig) -> str:
    """Emit the effective configuration as INI text; load_config inverts it."""
    c = rc.cascade
    out = io.StringIO()
    out.write("[cascade]\n")
    out.write("coarse_spacing = {} {} {}\n".format(*c.coarse_spacing))
    out.write(f"prob_threshold = {c.prob_threshold}\n")
    out.write(f"margin_mm = {c.margin_mm}\n")
    out.write("patch_dims = {} {} {}\n".format(*c.patch_dims))
    out.write("stride = {} {} {}\n".format(*c.stride))
    out.write(f"blend_sigma_frac = {c.blend_sigma_frac}\n")
    out.write(f"connectivity = {c.connectivity}\n")
    out.write(f"keep_lcc = {str(c.keep_lcc).lower()}\n")
    for section, desc in (
        ("coarse_backend", rc.coarse_backend),
        ("fine_backend", rc.fine_backend),
    ):
        out.write(f"\n[{section}]\n")
        for line in _backend_section_lines(desc):
            out.write(line + "\n")
    p = rc.phantom
    out.write("\n[phantom]\n")
    out.write("grid_dims = {} {} {}\n".format(*p.grid_dims))
    out.write("spacing = {} {} {}\n".format(*p.spacing))
    out.write(f"depth = {p.depth}\n")
    out.write(f"trachea_radius = {p.trachea_radius}\n")
    out.write(f"trachea_length = {p.trachea_length}\n")
    out.write(f"radius_ratio = {p.radius_ratio}\n")
    out.write(f"length_ratio = {p.length_ratio}\n")
    out.write(f"branch_angle = {p.branch_angle}\n")
    out.write(f"lumen_hu = {p.lumen_hu}\n")
    out.write(f"wall_hu = {p.wall_hu}\n")
    out.write(f"lung_hu = {p.lung_hu}\n")
    out.write(f"body_hu = {p.body_hu}\n")
    out.write(f"noise_sigma = {p.noise_sigma}\n")
    out.write(f"rng_seed = {p.rng_seed}\n")
    out.write("\n[run]\n")
    out.write(f"workers = {rc.workers}\n")
    if rc.input is not None or rc.out is not None:
        out.write("\n[io]\n")
        if rc.input is not None:
            out.write(f"input = {rc.input}\n")
        if rc.out is not None:
            out.write(f"out = {rc.out}\n")
    return out.getvalue()


def case_stem(path) -> str:
    """Case identity: filename minus compression/format/role suffixes."""
    name = Path(path).name
    if name.endswith(".gz"):
        name = name[:-3]
    for suffix in (".nii", ".raw", ".meta"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    for role in ROLE_SUFFIXES:
        if name.endswith(role):
            name = name[: -len(role)]
            break
    return name


def _is_volume_file(path: Path) -> bool:
    return path.name.endswith(VOLUME_SUFFIXES)


def _expand_inputs(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return sorted(c for c in p.iterdir() if _is_volume_file(c))
    if any(ch in spec for ch in "*?["):
        return sorted(Path(m) for m in globmod.glob(spec) if _is_volume_file(Path(m)))
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"input {spec!r} does not exist")


def _atomic_write_volume(g, path: Path) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    write_volume(g, tmp)
    os.replace(tmp, path)


def _atomic_write_text(text: str, path: Path) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _per_case_backend(desc: BackendDescriptor, stem: str) -> BackendDescriptor:
    if desc.kind == "oracle_file" and "{case}" in desc.params["path"]:
        return BackendDescriptor.oracle(desc.params["path"].format(case=stem))
    return desc


def _run_case(in_path: str, out_path: str, cascade: CascadeConfig,
              coarse: BackendDescriptor, fine: BackendDescriptor) -> dict:
    stem = case_stem(in_path)
    volume = read_volume(in_path)
    timings: dict[str, float] = {}
    started = time.perf_counter()
    pred = run_cascade(
        volume, cascade,
        _per_case_backend(coarse, stem), _per_case_backend(fine, stem),
        timings=timings,
    )
    total = time.perf_counter() - started
    _atomic_write_volume(pred, Path(out_path))
    return {
        "case": stem,
        "coarse_s": timings.get("coarse", 0.0),
        "crop_s": timings.get("crop", 0.0),
        "fine_s": timings.get("fine", 0.0),
        "post_s": timings.get("post", 0.0),
        "total_s": total,
    }


def cmd_phantom(args) -> int:
    rc = load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_base = args.seed_base if args.seed_base is not None else rc.phantom.rng_seed
    cases = []
    for i in range(args.count):
        spec = replace(rc.phantom, rng_seed=seed_base + i)
        volume, mask = generate_phantom(spec)
        name = f"{args.name}_{i:03d}"
        img_path = out_dir / f"{name}_img.nii.gz"
        gt_path = out_dir / f"{name}_gt.nii.gz"
        _atomic_write_volume(volume, img_path)
        _atomic_write_volume(mask, gt_path)
        entry = {
            "name": name,
            "seed": spec.rng_seed,
            "img": img_path.name,
            "gt": gt_path.name,
            "spec": {
                "grid_dims": list(spec.grid_dims),
                "spacing": list(spec.spacing),
                "depth": spec.depth,
                "trachea_radius": spec.trachea_radius,
                "trachea_length": spec.trachea_length,
                "radius_ratio": spec.radius_ratio,
                "length_ratio": spec.length_ratio,
                "branch_angle": spec.branch_angle,
                "lumen_hu": spec.lumen_hu,
                "wall_hu": spec.wall_hu,
                "lung_hu": spec.lung_hu,
                "body_hu": spec.body_hu,
                "noise_sigma": spec.noise_sigma,
            },
        }
        cases.append(entry)
        print(f"wrote {img_path.name} / {gt_path.name} (seed {spec.rng_seed})")
    _atomic_write_text(json.dumps({"cases": cases}, indent=2) + "\n", out_dir / "manifest.json")
    return 0


def cmd_run(args) -> int:
    rc = load_config(args.config)
    input_spec = args.input or rc.input
    out_spec = args.out or rc.out
    if not input_spec or not out_spec:
        print("run: --input and --out are required (flag or [io] config)", file=sys.stderr)
        return 2
    if args.no_lcc:
        rc.cascade = replace(rc.cascade, keep_lcc=False)
    workers = args.workers if args.workers is not None else rc.workers

    inputs = _expand_inputs(input_spec)
    if not inputs:
        print(f"run: no input volumes matched {input_spec!r}", file=sys.stderr)
        return 2
    out_dir = Path(out_spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(dump_config(rc), out_dir / "effective_config.ini")

    jobs = [
        (str(path), str(out_dir / f"{case_stem(path)}_pred.nii.gz"))
        for path in inputs
    ]
    rows, failures = [], []
    if workers <= 1:
        for in_path, out_path in jobs:
            try:
                rows.append(_run_case(in_path, out_path, rc.cascade,
                                      rc.coarse_backend, rc.fine_backend))
                print(f"ok {case_stem(in_path)} ({rows[-1]['total_s']:.2f}s)")
            except Exception as exc:
                failures.append((in_path, str(exc)))
                print(f"FAILED {case_stem(in_path)}: {exc}", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_case, in_path, out_path, rc.cascade,
                            rc.coarse_backend, rc.fine_backend): in_path
                for in_path, out_path in jobs
            }
            for future, in_path in futures.items():
                try:
                    rows.append(future.result())
                    print(f"ok {case_stem(in_path)} ({rows[-1]['total_s']:.2f}s)")
                except Exception as exc:
                    failures.append((in_path, str(exc)))
                    print(f"FAILED {case_stem(in_path)}: {exc}", file=sys.stderr)

    rows.sort(key=lambda r: r["case"])
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["case", "coarse_s", "crop_s", "fine_s", "post_s", "total_s"]
    )
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_text(buf.getvalue(), out_dir / "timing.csv")
    return 1 if failures else 0


def _file_role(path: Path) -> str:
    name = path.name
    if name.endswith(".gz"):
        name = name[:-3]
    name = name.rsplit(".", 1)[0]
    for role in ROLE_SUFFIXES:
        if name.endswith(role):
            return role
    return ""


def _stem_map(directory: Path, prefer_role: str) -> dict[str, Path]:
    """Map case stems to mask files, ignoring images.

    When one stem has several mask files, the directory's role
    (``_pred`` or ``_gt``) wins; remaining ambiguity is an error.
    """
    candidates: dict[str, list[Path]] = {}
    for path in sorted(directory.iterdir()):
        if not _is_volume_file(path) or _file_role(path) == "_img":
            continue
        candidates.setdefault(case_stem(path), []).append(path)
    mapping: dict[str, Path] = {}
    for stem, paths in candidates.items():
        if len(paths) == 1:
            mapping[stem] = paths[0]
            continue
        preferred = [p for p in paths if _file_role(p) == prefer_role]
        if len(preferred) != 1:
            names = ", ".join(p.name for p in paths)
            raise ValueError(f"ambiguous files for case {stem!r} in {directory}: {names}")
        mapping[stem] = preferred[0]
    return mapping


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        print("eval: --pred and --gt must be directories", file=sys.stderr)
        return 2
    preds = _stem_map(pred_dir, "_pred")
    gts = _stem_map(gt_dir, "_gt")
    shared = sorted(preds.keys() & gts.keys())
    unpaired = sorted(preds.keys() ^ gts.keys())
    for stem in unpaired:
        side = "prediction" if stem in preds else "ground truth"
        print(f"eval: unpaired {side} case {stem!r}", file=sys.stderr)
    if not shared:
        print("eval: no cases paired between the two directories", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for stem in shared:
        pred = read_mask(preds[stem])
        gt = read_mask(gts[stem])
        reports.append(evaluate_case(pred, gt, stem))
        if args.overlay:
            image_dir = Path(args.images) if args.images else gt_dir
            candidates = [
                image_dir / f"{stem}_img.nii.gz", image_dir / f"{stem}_img.nii",
                image_dir / f"{stem}.nii.gz", image_dir / f"{stem}.nii",
            ]
            image = next((c for c in candidates if c.exists()), None)
            if image is not None:
                volume = read_volume(image)
            else:
                print(f"eval: no image for {stem!r}, overlay on blank background",
                      file=sys.stderr)
                volume = Volume(
                    np.full(gt.dims, -1000.0, dtype=np.float32), gt.spacing, gt.origin
                )
            render_overlay(volume, pred, gt, 2, gt.dims[2] // 2,
                           out_dir / f"{stem}_overlay.ppm")

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["case", "tp", "fp", "fn", "tn", *METRIC_NAMES])
    for r in reports:
        writer.writerow([
            r.case_id, r.counts.tp, r.counts.fp, r.counts.fn, r.counts.tn,
            *(f"{r.metric(name):.6f}" for name in METRIC_NAMES),
        ])
    _atomic_write_text(buf.getvalue(), out_dir / "per_case.csv")

    agg = aggregate(reports)
    formatted = agg.formatted()
    payload = {
        "cases": agg.n_cases,
        "metrics": {
            name: {
                "mean": agg.mean[name],
                "std": agg.std[name],
                "formatted": formatted[name],
            }
            for name in METRIC_NAMES
        },
    }
    _atomic_write_text(json.dumps(payload, indent=2) + "\n", out_dir / "aggregate.json")
    for name in METRIC_NAMES:
        print(f"{name}: {formatted[name]}")
    return 0


def cmd_report(args) -> int:
    from airseg.report import generate_report

    written = generate_report(args.cases, args.out, timing_csv=args.timing)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airseg",
        description="Coarse-to-fine airway segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic image/ground-truth pairs")
    p.add_argument("--config", help=f"INI config path (or ${ENV_CONFIG})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of cases")
    p.add_argument("--seed-base", type=int, default=None,
                   help="first seed; case i uses seed-base + i")
    p.add_argument("--name", default="phantom", help="case name prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("run", help="run the cascade over a batch of volumes")
    p.add_argument("--config", help=f"INI config path (or ${ENV_CONFIG})")
    p.add_argument("--input", help="volume file, directory, or glob")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel case workers")
    p.add_argument("--no-lcc", action="store_true",
                   help="disable largest-component postprocessing")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overlay", action="store_true", help="write mid-slice overlays")
    p.add_argument("--images", help="directory of CT images for overlay backgrounds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures from eval outputs")
    p.add_argument("--cases", required=True, help="per-case CSV from eval")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--timing", help="timing CSV from run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"airseg {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
