"""Command-line interface.

Subcommands: ``phantom``, ``register``, ``synth``, ``eval`` and ``sweep``.
Settings come from an optional JSON config file (``--config``) and can be
overridden with ``--set section.key=value``; values are parsed as JSON when
possible. Exit status is 0 on success, 2 for invalid input and 3 for a
numerical or generation failure. Outputs never contain timings, so reruns
with the same settings produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import io
from .errors import DirSynthError, FitFailure, GenerationFailure, NumericalFailure
from .metrics import evaluate, psnr, ssim
from .phantom import PhantomSpec, generate, generate_cohort
from .registration import RegistrationConfig, Subject, register, register_batch
from .sampler import warp
from .synthesis import FUSION_METHODS, AtlasSubject, fuse_contrast, synthesize
from .transform import jacobian_determinant

log = logging.getLogger("dirsynth")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
WORKERS_ENV = "DIRSYNTH_WORKERS"

DEFAULT_CONFIG = {
    "registration": RegistrationConfig().to_dict(),
    "phantom": PhantomSpec().to_dict(),
    "fusion": "mean",
    "contrast": "wmn",
}


class ValidationError(DirSynthError, ValueError):
    """Bad command-line input: missing files, malformed overrides, and so on."""


# -- configuration -----------------------------------------------------------

def _merge(base, update):
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config, assignment):
    """Apply one ``dotted.key=value`` override, returning a new dict."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ValidationError(f"override {assignment!r} is not of the form key=value")
    parts = key.split(".")
    out = json.loads(json.dumps(config))
    node = out
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ValidationError(f"override {key!r}: {part!r} is not a config section")
        node = node[part]
    if parts[-1] not in node:
        raise ValidationError(f"override {key!r}: unknown key {parts[-1]!r}")
    node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path=None, overrides=()):
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        path = _existing(path)
        try:
            config = _merge(config, io.read_json(path))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides:
        config = apply_override(config, item)
    validate_config(config)
    return config


def validate_config(config):
    """Build every section once so bad values fail before any work starts."""
    registration_config(config)
    phantom_spec(config)
    if config["fusion"] not in FUSION_METHODS:
        raise ValidationError(f"unknown fusion method {config['fusion']!r}; expected one of {FUSION_METHODS}")
    if not isinstance(config["contrast"], str):
        raise ValidationError("contrast must be a name")


def registration_config(config):
    return RegistrationConfig.from_dict(config["registration"])


def phantom_spec(config):
    return PhantomSpec.from_dict(config["phantom"])


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"no such file: {p}")
    return p


def _workers(args):
    if args.workers is not None:
        n = args.workers
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValidationError("worker count must be at least 1")
    return n


# -- commands ----------------------------------------------------------------

def _subject_dir(outdir, index):
    return Path(outdir) / f"subject_{index:03d}"


def _write_subject(subject, d):
    for name, vol in subject.contrasts.items():
        io.write_volume(vol, d / f"{name}.nii")
    io.write_volume(subject.tissue_map, d / "labels.nii")
    io.write_mask(subject.mask, d / "mask.nii", subject.primary_contrast)


def cmd_phantom(args, config):
    """Write a seeded cohort plus its undeformed template.

    Each ``subject_NNN`` directory holds the contrasts, labels, mask and the
    true displacement relative to ``template``; registering the template
    (moving) to a subject (fixed) should recover that displacement.
    """
    spec = phantom_spec(config)
    if args.n < 1:
        raise ValidationError("--n must be at least 1")
    outdir = Path(args.outdir)
    _write_subject(generate(spec), outdir / "template")
    cohort = generate_cohort(spec, args.n)
    atlases = []
    for i, subject in enumerate(cohort):
        d = _subject_dir(outdir, i)
        _write_subject(subject, d)
        io.write_volume(subject.true_displacement, d / "truth_displacement.nii")
        atlases.append({
            "id": d.name,
            "primary": f"{d.name}/{subject.primary}.nii",
            "contrasts": {n: f"{d.name}/{n}.nii" for n in subject.secondary_names()},
            "labels": f"{d.name}/labels.nii",
        })
    io.write_json(outdir / "spec.json", spec.to_dict())
    io.write_json(outdir / "manifest.json", {"primary_name": spec.primary, "atlases": atlases})
    log.info("wrote %d subjects to %s", len(cohort), outdir)


def _loss_rows(result):
    for level, totals in enumerate(result.loss_trace):
        for iteration, total in enumerate(totals):
            yield level, iteration, total


def cmd_register(args, config):
    """Register a moving volume to a fixed one and write the displacement and warped image."""
    cfg = registration_config(config)
    fixed = io.read_volume(_existing(args.fixed))
    moving = io.read_volume(_existing(args.moving))
    fixed_labels = io.read_labels(_existing(args.fixed_labels)) if args.fixed_labels else None
    moving_labels = io.read_labels(_existing(args.moving_labels)) if args.moving_labels else None
    supervision = None
    if cfg.mode == "supervised":
        if not (args.fixed_secondary and args.moving_secondary):
            raise ValidationError("supervised mode needs --fixed-secondary and --moving-secondary")
        supervision = (io.read_volume(_existing(args.fixed_secondary)), io.read_volume(_existing(args.moving_secondary)))
    result = register(Subject(fixed, fixed_labels), Subject(moving, moving_labels), cfg, supervision)

    outdir = Path(args.outdir)
    io.write_volume(result.displacement, outdir / "displacement.nii")
    io.write_volume(warp(moving, result.displacement), outdir / "warped.nii")
    io.write_csv(outdir / "loss_trace.csv", ["level", "iteration", "total"], _loss_rows(result))
    jac = jacobian_determinant(result.displacement).data[1:-1, 1:-1, 1:-1]
    summary = {
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "converged": result.converged,
        "iterations": [len(t) for t in result.loss_trace],
        "min_interior_jacobian": float(jac.min()),
        "max_displacement": result.displacement.max_norm(),
        "config": cfg.to_dict(),
    }
    if args.truth:
        truth = io.read_volume(_existing(args.truth))
        err = np.sqrt(((result.displacement.vectors - truth.vectors) ** 2).sum(-1))
        region = io.read_mask(_existing(args.mask)) if args.mask else np.ones(err.shape, bool)
        summary["mean_endpoint_error"] = float(err[region].mean())
    io.write_json(outdir / "summary.json", summary)
    log.info("final loss %.6g (initial %.6g)", result.final_loss, result.initial_loss)


def _load_manifest(path):
    path = _existing(path)
    manifest = io.read_json(path)
    root = path.parent
    primary_name = manifest.get("primary_name", "primary")
    atlases = []
    for entry in manifest.get("atlases", []):
        primary = io.read_volume(_existing(root / entry["primary"]))
        contrasts = {n: io.read_volume(_existing(root / p)) for n, p in sorted(entry.get("contrasts", {}).items())}
        labels = io.read_labels(_existing(root / entry["labels"])) if entry.get("labels") else None
        atlases.append(AtlasSubject(primary, contrasts, labels, primary_name, str(entry["id"])))
    if not atlases:
        raise ValidationError(f"{path}: manifest lists no atlases")
    return atlases


def cmd_synth(args, config):
    """Synthesize one or more contrasts for a target from an atlas manifest."""
    cfg = registration_config(config)
    method = args.method or config["fusion"]
    if method not in FUSION_METHODS:
        raise ValidationError(f"unknown fusion method {method!r}")
    names = args.contrast or [config["contrast"]]
    atlases = _load_manifest(args.manifest)
    image = io.read_volume(_existing(args.fixed))
    labels = io.read_labels(_existing(args.fixed_labels)) if args.fixed_labels else None
    fixed = AtlasSubject(image, {}, labels, atlases[0].primary_name, "target")
    run = synthesize(fixed, atlases, names, method, cfg, workers=_workers(args))

    outdir = Path(args.outdir)
    for name in names:
        io.write_volume(run[name].synthetic, outdir / f"synthetic_{name}.nii")
    registrations = []
    for rid, atlas, result in zip(run.registration_ids, atlases, run.registrations):
        entry = {"id": rid, "atlas_id": atlas.atlas_id, "final_loss": result.final_loss}
        if args.save_displacements:
            entry["displacement"] = f"displacement_{atlas.atlas_id}.nii"
            io.write_volume(result.displacement, outdir / entry["displacement"])
        registrations.append(entry)
    io.write_json(outdir / "fusion.json", {
        "method": method,
        "registrations": registrations,
        "contrasts": {name: run[name].to_dict() for name in names},
    })
    log.info("synthesized %s from %d atlases", ", ".join(names), len(atlases))


METRIC_HEADER = ["subject", "method", "atlas_count", "psnr", "ssim", "mask_voxels", "mean_dice"]


def cmd_eval(args, config):
    """Masked PSNR/SSIM (and label Dice when both label maps are given) to CSV."""
    reference = io.read_volume(_existing(args.reference))
    test = io.read_volume(_existing(args.test))
    mask = io.read_mask(_existing(args.mask)) if args.mask else None
    ref_labels = io.read_labels(_existing(args.labels)) if args.labels else None
    test_labels = io.read_labels(_existing(args.test_labels)) if args.test_labels else None
    report = evaluate(reference, test, mask, ref_labels, test_labels)
    row = [args.subject, args.method, args.atlas_count, report.psnr, report.ssim, report.mask_voxels, report.mean_dice]
    header = list(METRIC_HEADER)
    for label in sorted(report.dice_per_label):
        header.append(f"dice_{label}")
        row.append(report.dice_per_label[label])
    io.write_csv(args.out, header, [row])
    print(f"psnr={report.psnr:.4f} ssim={report.ssim:.6f}")


SWEEP_HEADER = ["seed", "method", "atlas_count", "psnr", "ssim"]
SWEEP_METHODS = ("mean", "median")


def sweep_cell(spec, seed, max_atlases, contrast, cfg, workers=1):
    """All rows for one seed: register N atlases once, then fuse every prefix."""
    cohort = generate_cohort(replace(spec, seed=seed), max_atlases + 1)
    target = cohort[0]
    atlases = [AtlasSubject.from_phantom(s, f"atlas{i:02d}") for i, s in enumerate(cohort[1:], 1)]
    fixed = AtlasSubject.from_phantom(target, "target")
    results = register_batch(fixed.as_subject(), [a.as_subject() for a in atlases], cfg, workers=workers)
    truth = target.contrasts[contrast]
    rows = []
    for method in SWEEP_METHODS:
        for k in range(1, max_atlases + 1):
            synth = fuse_contrast(results[:k], atlases[:k], contrast, method).synthetic
            rows.append([seed, method, k, psnr(truth, synth, target.mask), ssim(truth, synth, target.mask)])
    return rows


def summarize_sweep(rows, max_atlases):
    """Per-k means, the Spearman trend of mean PSNR, and mean versus median at the largest k."""
    seeds = sorted({r["seed"] for r in rows})
    counts = list(range(1, max_atlases + 1))
    per_k = {}
    for method in SWEEP_METHODS:
        per_k[method] = [
            {
                "atlas_count": k,
                "psnr": float(np.mean([r["psnr"] for r in rows if r["method"] == method and r["atlas_count"] == k])),
                "ssim": float(np.mean([r["ssim"] for r in rows if r["method"] == method and r["atlas_count"] == k])),
            }
            for k in counts
        ]
    mean_psnr = [c["psnr"] for c in per_k["mean"]]
    rho = spearmanr(counts, mean_psnr).statistic
    by = {(r["seed"], r["method"], r["atlas_count"]): r for r in rows}
    comparison = [
        {
            "seed": s,
            "mean_psnr": by[(s, "mean", max_atlases)]["psnr"],
            "median_psnr": by[(s, "median", max_atlases)]["psnr"],
            "mean_at_least_median": by[(s, "mean", max_atlases)]["psnr"] >= by[(s, "median", max_atlases)]["psnr"],
        }
        for s in seeds
    ]
    first, last = per_k["mean"][0], per_k["mean"][-1]
    return {
        "seeds": seeds,
        "max_atlases": max_atlases,
        "per_atlas_count": per_k,
        "spearman_psnr_vs_count": float(rho),
        "trend_positive": bool(rho > 0),
        "psnr_gain": last["psnr"] - first["psnr"],
        "ssim_gain": last["ssim"] - first["ssim"],
        "mean_vs_median": comparison,
        "seeds_mean_at_least_median": sum(c["mean_at_least_median"] for c in comparison),
    }


def _rows_as_dicts(rows):
    return [dict(zip(SWEEP_HEADER, r)) for r in rows]


def cmd_sweep(args, config):
    """Atlas-count sweep: CSV per seed, a combined long CSV, a JSON summary and a PNG figure."""
    from .plotting import save_sweep_figure

    if args.max_atlases < 2:
        raise ValidationError("--max-atlases must be at least 2 to measure a trend")
    seeds = sorted(set(args.seeds))
    if len(seeds) < 1:
        raise ValidationError("need at least one seed")
    spec = phantom_spec(config)
    cfg = registration_config(config)
    contrast = config["contrast"]
    if contrast not in spec.contrasts or contrast == spec.primary:
        raise ValidationError(f"contrast {contrast!r} must be a secondary phantom contrast")
    outdir = Path(args.outdir)
    workers = _workers(args)
    rows = []
    for seed in seeds:
        cell = outdir / "cells" / f"seed_{seed}.csv"
        cell_rows = sweep_cell(spec, seed, args.max_atlases, contrast, cfg, workers)
        io.write_csv(cell, SWEEP_HEADER, cell_rows)
        rows.extend(cell_rows)
        log.info("seed %d done", seed)
    io.write_csv(outdir / "sweep.csv", SWEEP_HEADER, rows)
    summary = summarize_sweep(_rows_as_dicts(rows), args.max_atlases)
    io.write_json(outdir / "summary.json", summary)
    save_sweep_figure(_rows_as_dicts(rows), outdir / "sweep.png")
    print(f"spearman={summary['spearman_psnr_vs_count']:.3f} psnr_gain={summary['psnr_gain']:.3f} dB")


# -- entry point -------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dirsynth", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. registration.step_size=0.25")
    parser.add_argument("--workers", type=int, help=f"parallel jobs (default: ${WORKERS_ENV} or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="register a moving volume to a fixed volume")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--fixed-secondary")
    p.add_argument("--moving-secondary")
    p.add_argument("--truth", help="true displacement, for reporting endpoint error")
    p.add_argument("--mask", help="region for the endpoint error")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="synthesize contrasts from an atlas manifest")
    p.add_argument("fixed")
    p.add_argument("--fixed-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--contrast", action="append", help="contrast to synthesize (repeatable)")
    p.add_argument("--method", choices=FUSION_METHODS)
    p.add_argument("--save-displacements", action="store_true", help="also write each atlas displacement field")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="masked PSNR/SSIM of a test volume against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--mask")
    p.add_argument("--labels", help="reference label map")
    p.add_argument("--test-labels")
    p.add_argument("--subject", default="")
    p.add_argument("--method", default="")
    p.add_argument("--atlas-count", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="fusion quality against the number of atlases")
    p.add_argument("--max-atlases", type=int, default=9)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        args.func(args, config)
    except (NumericalFailure, GenerationFailure, FitFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
