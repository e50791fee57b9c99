"""Command-line entry point.

Subcommands: ``simulate``, ``estimate``, ``recover-bias`` and ``evaluate``.
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, Manifest, load_config
from .io import VolumeIOError, read_volume, write_volume
from .mixed_model import NumericalError

log = logging.getLogger("lmmtemplate")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


class StageError(Exception):
    def __init__(self, code, stage, message):
        super().__init__(f"{stage}: {message}")
        self.code = code


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _read(path, stage, labels=False):
    if path is None:
        raise StageError(EXIT_CONFIG, stage, "missing path in manifest")
    if not Path(path).exists():
        raise StageError(EXIT_IO, stage, f"missing file {path}")
    try:
        return read_volume(path, labels=labels)
    except VolumeIOError as exc:
        raise StageError(EXIT_IO, stage, str(exc)) from exc


def _write(vol, path, stage, dtype=None):
    try:
        write_volume(vol, path, dtype=dtype)
    except VolumeIOError as exc:
        raise StageError(EXIT_IO, stage, str(exc)) from exc


def _outdir(path, stage):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise StageError(EXIT_IO, stage, f"cannot write to {out}: {exc.strerror or exc}") from exc
    return out


def _field_ext(cfg: Config):
    return ".nii" if cfg.output_format == "nii" else ".af3d"


# -- simulate ----------------------------------------------------------------


def cmd_simulate(cfg: Config) -> int:
    from .synth import simulate_cohort

    out = _outdir(cfg.out, "simulate")
    try:
        spec = cfg.phantom()
    except ValueError as exc:
        raise StageError(EXIT_CONFIG, "simulate", str(exc)) from exc
    cohort = simulate_cohort(spec)
    man = Manifest()
    _write(cohort.template, out / "template.nii", "simulate", "float32")
    _write(cohort.template_labels, out / "template_labels.nii", "simulate")
    man.entries["template"] = "template.nii"
    man.entries["template.labels"] = "template_labels.nii"
    man.entries["seed"] = str(cfg.seed)
    for i, im in enumerate(cohort.images):
        names = {
            "observed": (im.observed, f"image_{i}_observed.nii", "float32"),
            "clean": (im.clean, f"image_{i}_clean.nii", "float32"),
            "labels": (im.labels, f"image_{i}_labels.nii", None),
            "bias": (im.bias, f"image_{i}_bias.af3d", None),
            "deformation": (im.deformation, f"image_{i}_deformation.af3d", None),
        }
        for kind, (vol, name, dtype) in names.items():
            _write(vol, out / name, "simulate", dtype)
            man.entries[f"image.{i}.{kind}"] = name
        man.entries[f"image.{i}.seed"] = str(im.seed)
    try:
        man.write(out / "manifest.txt")
        (out / "config_resolved.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise StageError(EXIT_IO, "simulate", str(exc)) from exc
    log.info("wrote %d images to %s", len(cohort.images), out)
    return EXIT_OK


# -- estimate ----------------------------------------------------------------


def _input_paths(cfg: Config):
    if cfg.manifest:
        try:
            man = Manifest.read(cfg.manifest)
        except OSError as exc:
            raise StageError(EXIT_IO, "input", f"cannot read manifest {cfg.manifest}") from exc
        except ConfigError as exc:
            raise StageError(EXIT_CONFIG, "input", str(exc)) from exc
        paths = [man.path(i, "observed") for i in range(man.n_images())]
        if any(p is None for p in paths):
            raise StageError(EXIT_CONFIG, "input", "manifest lacks image.<i>.observed entries")
        return paths
    return [Path(p) for p in cfg.images]


def _load_images(cfg: Config):
    paths = _input_paths(cfg)
    if len(paths) < 2:
        raise StageError(EXIT_CONFIG, "input", f"need at least 2 images, got {len(paths)}")
    images = [_read(p, "input") for p in paths]
    for p, img in zip(paths[1:], images[1:]):
        if not img.grid.matches(images[0].grid):
            raise StageError(
                EXIT_CONFIG, "input",
                f"grid of {p} {img.grid.dims}/{img.grid.spacing} does not match "
                f"{paths[0]} {images[0].grid.dims}/{images[0].grid.spacing}",
            )
    return paths, images


def cmd_estimate(cfg: Config, bias_only=False) -> int:
    from .template import run_pipeline

    paths, images = _load_images(cfg)
    out = _outdir(cfg.out, "estimate")
    pcfg = cfg.pipeline()
    rows = []

    def record(state, rec):
        vp = rec.variances
        rows.append(
            [rec.iteration, _fmt(vp.sigma2)] + [_fmt(v) for v in vp.lambdas]
            + [_fmt(vp.beta), _fmt(rec.nll)]
        )

    try:
        state = run_pipeline(images, pcfg, callback=record)
    except NumericalError as exc:
        raise StageError(EXIT_NUMERICAL, "estimate", str(exc)) from exc
    except FloatingPointError as exc:
        raise StageError(EXIT_NUMERICAL, "estimate", str(exc)) from exc
    ext = _field_ext(cfg)
    for i, b in enumerate(state.bias):
        _write(b, out / f"bias_{i}{ext}", "write outputs")
    if not bias_only:
        _write(state.template, out / "template.nii", "write outputs", "float32")
        fwd = state.displacements(pcfg.euler_steps)
        inv = state.inverse_displacements(pcfg.euler_steps)
        for i in range(len(images)):
            _write(fwd[i], out / f"disp_{i}.af3d", "write outputs")
            _write(inv[i], out / f"invdisp_{i}.af3d", "write outputs")
    header = ["iteration", "sigma2"] + [f"lambda_{m + 1}" for m in range(len(pcfg.spacings))]
    header += ["beta", "L"]
    try:
        (out / "variances.txt").write_text(state.variances.to_text(), encoding="utf-8")
        _write_csv(out / "iterations.csv", header, rows)
        if state.traces:
            _write_csv(
                out / "traces.csv",
                ["outer", "image", "level", "iteration", "P", "grad_norm", "step"],
                [[o, i, m + 1, k, _fmt(p), _fmt(g), _fmt(s)]
                 for o, i, m, k, p, g, s in state.traces],
            )
        (out / "config_resolved.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise StageError(EXIT_IO, "write outputs", str(exc)) from exc
    log.info("estimation finished after %d iterations (converged=%s)",
             state.iteration, state.converged)
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(cfg: Config) -> int:
    from .evaluation import bias_rmse, pairwise_overlaps, pearson, rmse, sharpness
    from .volume import Volume3, warp_labels

    if not cfg.manifest:
        raise StageError(EXIT_CONFIG, "evaluate", "a manifest is required")
    if not cfg.results:
        raise StageError(EXIT_CONFIG, "evaluate", "--results DIR is required")
    try:
        man = Manifest.read(cfg.manifest)
    except OSError as exc:
        raise StageError(EXIT_IO, "evaluate", f"cannot read manifest {cfg.manifest}") from exc
    res = Path(cfg.results)
    out = _outdir(cfg.out, "evaluate")
    n = man.n_images()
    ext = _field_ext(cfg)
    rows = []
    labels = [man.path(i, "labels") for i in range(n)]
    # bias recovery
    bias_rows = []
    fg_path = man.get("template.labels")
    for i in range(n):
        truth_path = man.path(i, "bias")
        if truth_path is None:
            continue
        truth = _read(truth_path, "evaluate")
        rec = _read(res / f"bias_{i}{ext}", "evaluate")
        if labels[i] is not None:
            mask = _read(labels[i], "evaluate", labels=True).data > 0
        elif fg_path is not None:
            mask = _read(fg_path, "evaluate", labels=True).data > 0
        else:
            mask = np.ones(truth.dims, dtype=bool)
        zero = Volume3(truth.grid, np.zeros(truth.dims))
        base = bias_rmse(zero, truth, mask)
        err = bias_rmse(rec, truth, mask)
        rows.append([str(i), "all", "bias_rmse", _fmt(err)])
        rows.append([str(i), "all", "bias_rmse_zero", _fmt(base)])
        if np.any(truth.data[mask]):
            rows.append([str(i), "all", "bias_pearson", _fmt(pearson(rec, truth, mask))])
        bias_rows.append((err, base))
    if bias_rows:
        rows.append(["all", "all", "bias_rmse", _fmt(np.mean([r[0] for r in bias_rows]))])
        rows.append(["all", "all", "bias_rmse_zero", _fmt(np.mean([r[1] for r in bias_rows]))])
    # overlaps before and after mapping to the template
    if all(p is not None for p in labels) and n >= 2:
        raw = [_read(p, "evaluate", labels=True) for p in labels]
        mapped = []
        for i, lab in enumerate(raw):
            inv = _read(res / f"invdisp_{i}.af3d", "evaluate")
            mapped.append(warp_labels(lab, inv))
        for tag, vols in (("pre", raw), ("post", mapped)):
            rep = pairwise_overlaps(vols)
            for src, tgt, lab, d, t in rep.rows:
                rows.append([f"{src}-{tgt}", str(lab), f"dice_{tag}", _fmt(d)])
                rows.append([f"{src}-{tgt}", str(lab), f"target_overlap_{tag}", _fmt(t)])
            for lab in rep.labels:
                rows.append(["all", str(lab), f"dice_{tag}", _fmt(rep.mean_dice(lab))])
            rows.append(["all", "all", f"dice_{tag}", _fmt(rep.mean_dice())])
            rows.append(["all", "all", f"target_overlap_{tag}", _fmt(rep.mean_target())])
    # template quality
    tpath = res / "template.nii"
    if tpath.exists():
        tmpl = _read(tpath, "evaluate")
        rows.append(["template", "all", "sharpness", _fmt(sharpness(tmpl))])
        truth_t = man.get("template")
        if truth_t is not None and Path(truth_t).exists():
            rows.append(["template", "all", "rmse", _fmt(rmse(tmpl, _read(truth_t, "evaluate")))])
        obs = [man.path(i, "observed") for i in range(n)]
        if all(p is not None for p in obs):
            vols = [_read(p, "evaluate") for p in obs]
            mean = Volume3(vols[0].grid, np.mean([v.data for v in vols], axis=0))
            rows.append(["unaligned_mean", "all", "sharpness", _fmt(sharpness(mean))])
            if truth_t is not None and Path(truth_t).exists():
                rows.append(["unaligned_mean", "all", "rmse",
                             _fmt(rmse(mean, _read(truth_t, "evaluate")))])
    try:
        _write_csv(out / "evaluation.csv", ["pair", "label", "metric", "value"], rows)
        (out / "config_resolved.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise StageError(EXIT_IO, "evaluate", str(exc)) from exc
    return EXIT_OK


# -- argument handling ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmmtemplate",
        description="Template estimation with deformation, bias and variance components.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="worker cap (computation is sequential)")
    common.add_argument("--levels", help="control spacings in mm, coarse to fine, e.g. 20,10,6")
    common.add_argument("--patch-edge", type=int)
    common.add_argument("--euler-steps", type=int)
    common.add_argument("--max-outer", type=int)
    common.add_argument("--manifest", help="manifest written by simulate")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    common.add_argument("--verbose", action="store_true")
    sub.add_parser("simulate", parents=[common], help="generate a phantom cohort")
    for name, text in (("estimate", "run the full estimation"),
                       ("recover-bias", "run the estimation and write bias fields only")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("images", nargs="*", help="input volumes (instead of --manifest)")
    p = sub.add_parser("evaluate", parents=[common], help="compare outputs with ground truth")
    p.add_argument("--results", help="directory written by estimate")
    return parser


def _overrides(args) -> dict:
    ov = {}
    for key in ("out", "seed", "workers", "levels", "patch_edge", "euler_steps",
                "max_outer", "manifest"):
        v = getattr(args, key, None)
        if v is not None:
            ov[key] = v
    if getattr(args, "images", None):
        ov["images"] = ",".join(args.images)
    if getattr(args, "results", None):
        ov["results"] = args.results
    if args.verbose:
        ov["verbose"] = "true"
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"lmmtemplate: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if cfg.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        if args.command == "recover-bias":
            return cmd_estimate(cfg, bias_only=True)
        return cmd_evaluate(cfg)
    except StageError as exc:
        print(f"lmmtemplate: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"lmmtemplate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VolumeIOError as exc:
        print(f"lmmtemplate: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lmmtemplate: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
