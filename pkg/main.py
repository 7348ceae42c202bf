"""sparselets: sparse edge coding of natural images

Subcommands:
  synth        render a circle-in-noise stimulus (optionally the envelope mosaic)
  extract      whiten, mask and run Matching Pursuit on one image
  reconstruct  rebuild an image from an edge file
  learn        Sparse Hebbian Learning of a patch dictionary
  stats        orientation histogram and chevron map over a folder of edge files
  equalize     orientation set from an orientation histogram
  bench        corpus experiments (efficiency, sweep, noise, sizes, orientation)

Usage:
    python main.py synth --radius 64 --clutter 200 --seed 1 --out stim.pgm
    python main.py extract --in img.png --edges out.json --alpha 0.8 --max-edges 2048 --threshold 0.03
    python main.py reconstruct --edges out.json --out rec.pgm
    python main.py learn --corpus manifest.txt --steps 20000 --atoms 324 --homeo histogram --out dict.npz --log train.csv
    python main.py stats --edges-dir edges/ --chevron chevron.json --orientation hist.json
    python main.py equalize --hist hist.json --n 24 --out thetas.json
    python main.py bench efficiency --corpus manifest.txt --out results/

Every output file X gets a sidecar X.meta.json (config hash, seed, version).
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
)
logger = logging.getLogger("sparselets")

HOMEO_CHOICES = ("none", "variance", "histogram")
BENCH_EXPERIMENTS = ("efficiency", "sweep", "noise", "sizes", "orientation")


def _resolve_config(args):
    from engine.config import RunConfig, load_config

    path = args.config or os.environ.get("SPARSELETS_CONFIG")
    cfg = load_config(path) if path else RunConfig()
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "image_size": getattr(args, "size", None),
        "corpus": getattr(args, "corpus", None),
        "pursuit.alpha": getattr(args, "alpha", None),
        "pursuit.max_edges": getattr(args, "max_edges", None),
        "pursuit.energy_threshold": getattr(args, "threshold", None),
        "cooc.eta": getattr(args, "eta", None),
        "shl.n_steps": getattr(args, "steps", None),
        "shl.n_atoms": getattr(args, "atoms", None),
        "shl.homeo_mode": getattr(args, "homeo", None),
    }
    return cfg.with_overrides(overrides)


def _bank_for(cfg, size, thetas=None):
    from dataclasses import replace
    from engine.loggabor import build_bank

    params = cfg.bank if thetas is None else replace(cfg.bank, thetas=tuple(thetas),
                                                     n_orientations=len(thetas))
    return build_bank(params.fitted(size), size, workers=cfg.workers or None)


def _corpus_path(cfg):
    path = cfg.corpus or os.environ.get("SPARSELETS_CORPUS")
    if not path:
        raise ValueError("no corpus manifest: pass --corpus, set corpus in the config, or SPARSELETS_CORPUS")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    from engine.config import write_run_metadata
    from engine.imagecore import SyntheticStimulusSpec, plant_circle_in_noise, save_image
    from engine.loggabor import export_envelope_grid

    size = cfg.image_size
    bank = _bank_for(cfg, size)
    top = bank.n_scales - 1
    spec = SyntheticStimulusSpec(radius=args.radius, n_clutter=args.clutter, seed=cfg.seed,
                                 clutter_scale_range=(min(1, top), min(4, top)),
                                 circle_scale=args.circle_scale, size=size)
    img, planted = plant_circle_in_noise(spec, bank)
    save_image(args.out, img)
    n_circle = sum(1 for p in planted if p["on_circle"])
    write_run_metadata(args.out, cfg, "synth", extra={"n_circle": n_circle, "radius": args.radius,
                                                       "n_clutter": args.clutter})
    logger.info("Wrote %dx%d stimulus (%d circle atoms, %d clutter) to %s",
                size, size, n_circle, args.clutter, args.out)
    if args.envelopes:
        export_envelope_grid(bank, args.envelopes)
        write_run_metadata(args.envelopes, cfg, "synth")


def cmd_extract(args, cfg):
    from engine.config import write_run_metadata
    from engine.imagecore import load_image, prepare_image, save_image
    from engine.pursuit import extract, save_edges

    img = load_image(args.input, cfg.image_size)
    prepared = img if args.prepared else prepare_image(img, cfg.whitening)
    thetas = None
    if args.thetas:
        from engine.priors import load_thetas
        thetas = load_thetas(args.thetas)
    bank = _bank_for(cfg, cfg.image_size, thetas)
    inputs = [args.input] + ([args.thetas] if args.thetas else [])

    if args.prior:
        from engine.priors import extract_with_prior, load_chevron
        prior = load_chevron(args.prior)
        edges = extract_with_prior(prepared, bank, prior, cfg.pursuit, cfg.cooc)
        inputs.append(args.prior)
    else:
        edges = extract(prepared, bank, cfg.pursuit)
    save_edges(args.edges, edges)
    write_run_metadata(args.edges, cfg, "extract", inputs=inputs,
                       extra={"n_edges": len(edges), "n_steps": edges.n_steps,
                              "residual": edges.residual_fraction()})
    if args.prepared_out:
        save_image(args.prepared_out, prepared)
        write_run_metadata(args.prepared_out, cfg, "extract", inputs=[args.input])


def cmd_reconstruct(args, cfg):
    from engine.config import write_run_metadata
    from engine.imagecore import save_image
    from engine.loggabor import build_bank
    from engine.pursuit import load_edges, reconstruct

    edges = load_edges(args.edges)
    bank = build_bank(edges.bank_params, edges.image_size, workers=cfg.workers or None)
    img = reconstruct(edges, bank)
    save_image(args.out, img)
    write_run_metadata(args.out, cfg, "reconstruct", inputs=[args.edges])
    logger.info("Reconstructed %d edges into %s", len(edges), args.out)


def cmd_learn(args, cfg):
    from engine.config import write_run_metadata
    from engine.imagecore import load_corpus, whiten
    from engine.shl import (
        PatchSampler,
        efficiency_report,
        init_dictionary,
        learn,
        save_dictionary,
        write_training_log,
    )
    from engine.bench import write_csv

    manifest = _corpus_path(cfg)
    params = cfg.shl
    train = load_corpus(manifest, cfg.image_size, split="train", workers=cfg.workers or None,
                        skip_bad=args.skip_bad)
    sampler = PatchSampler([whiten(img, cfg.whitening) for _, img in train], params.patch_side, seed=cfg.seed)
    initial = init_dictionary(params.patch_size, params.n_atoms, cfg.seed, params.homeo_mode)
    dictionary, log = learn(sampler, params, seed=cfg.seed, dictionary=initial.copy())
    save_dictionary(args.out, dictionary, params)
    write_run_metadata(args.out, cfg, "learn", inputs=[manifest])
    if args.log:
        write_training_log(args.log, log)
        write_run_metadata(args.log, cfg, "learn", inputs=[manifest])
    if args.report:
        test = load_corpus(manifest, cfg.image_size, split="test", workers=cfg.workers or None,
                           skip_bad=args.skip_bad)
        held_out = PatchSampler([whiten(img, cfg.whitening) for _, img in test], params.patch_side,
                                seed=cfg.seed + 1).sample(args.report_patches)
        grid = (0, 1, 2, 4, 8, 16, 32)
        learned = efficiency_report(dictionary, held_out, grid)
        before = efficiency_report(initial, held_out, grid)
        rows = [{"N": a["N"], "learned_mean": a["mean"], "learned_std": a["std"],
                 "initial_mean": b["mean"], "initial_std": b["std"]} for a, b in zip(learned, before)]
        write_csv(args.report, rows, ["N", "learned_mean", "learned_std", "initial_mean", "initial_std"])
        write_run_metadata(args.report, cfg, "learn", inputs=[manifest])


def _edge_files(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"edge folder not found: {folder}")
    return sorted(p for p in folder.glob("*.json") if not p.name.endswith(".meta.json"))


def cmd_stats(args, cfg):
    from engine.config import write_run_metadata
    from engine.priors import (
        ChevronBinning,
        chevron_stats,
        orientation_stats,
        save_chevron,
        save_orientation_hist,
    )
    from engine.pursuit import load_edges

    files = _edge_files(args.edges_dir)
    edge_lists = [load_edges(p) for p in files]
    inputs = [str(p) for p in files]
    if args.chevron:
        radius = cfg.cooc.neighborhood_radius
        d_edges = (0.0,) + tuple(e for e in (0.5, 1.0, 2.0) if e < radius) + (radius,)
        binning = ChevronBinning(weighting=args.weighting, d_edges=d_edges)
        hist = chevron_stats(edge_lists, binning, workers=cfg.workers or 1)
        save_chevron(args.chevron, hist)
        write_run_metadata(args.chevron, cfg, "stats", inputs=inputs, extra={"n_pairs": hist.n_pairs})
    if args.orientation:
        n_bins = args.bins or cfg.bank.n_orientations
        ohist = orientation_stats(edge_lists, n_bins=n_bins, weighting=args.weighting)
        save_orientation_hist(args.orientation, ohist)
        write_run_metadata(args.orientation, cfg, "stats", inputs=inputs)
    if not args.chevron and not args.orientation:
        raise ValueError("stats needs --chevron and/or --orientation")


def cmd_equalize(args, cfg):
    from engine.config import write_run_metadata
    from engine.priors import equalize_orientations, load_orientation_hist, save_thetas

    hist = load_orientation_hist(args.hist)
    thetas = equalize_orientations(hist, args.n)
    save_thetas(args.out, thetas)
    write_run_metadata(args.out, cfg, "equalize", inputs=[args.hist])
    logger.info("Wrote %d equalized orientations to %s", len(thetas), args.out)


def _parse_values(variable, text):
    cast = int if variable in ("n_orientations", "n_scales") else float
    return tuple(cast(v.strip()) for v in text.split(",") if v.strip())


def cmd_bench(args, cfg):
    from dataclasses import asdict
    from engine import bench
    from engine.config import write_run_metadata
    from engine.imagecore import load_corpus, prepare_image

    manifest = _corpus_path(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    load_size = max(_parse_values("n_scales", args.sizes)) if args.experiment == "sizes" else cfg.image_size
    raw = load_corpus(manifest, load_size, split=args.split, workers=cfg.workers or None, skip_bad=args.skip_bad)
    prepared = [(i, prepare_image(img, cfg.whitening)) for i, img in raw]
    written = []

    if args.experiment == "efficiency":
        bank = _bank_for(cfg, cfg.image_size)
        records = bench.efficiency_experiment(prepared, bank, cfg.pursuit)
        bench.write_csv(out / "efficiency.csv", records, bench.EFFICIENCY_HEADER)
        bench.write_csv(out / "efficiency_summary.csv", bench.aggregate(records), ["N", "E_mean", "E_std", "bpp"])
        written += [out / "efficiency.csv", out / "efficiency_summary.csv"]
    elif args.experiment == "sweep":
        if not args.param or not args.values:
            raise ValueError("bench sweep needs --param and --values")
        baseline = cfg.bank.fitted(cfg.image_size)
        spec = bench.SweepSpec(args.param, _parse_values(args.param, args.values), baseline=baseline)
        rows = bench.parameter_sweep(prepared, spec, cfg.pursuit)
        path = out / f"sweep_{args.param}.csv"
        bench.write_csv(path, rows, bench.SWEEP_HEADER)
        written.append(path)
        failed = [r for r in rows if r["error"]]
        if failed:
            logger.error("%d sweep values failed: %s", len(failed), ", ".join(str(r["value"]) for r in failed))
    elif args.experiment == "noise":
        bank = _bank_for(cfg, cfg.image_size)
        result = bench.noise_robustness(raw, bank, cfg.pursuit, snr_halving=True,
                                        whitening=cfg.whitening, seed=cfg.seed)
        bench.write_csv(out / "noise_clean.csv", result.clean, bench.EFFICIENCY_HEADER)
        bench.write_csv(out / "noise_noisy.csv", result.noisy, bench.EFFICIENCY_HEADER)
        written += [out / "noise_clean.csv", out / "noise_noisy.csv"]
    elif args.experiment == "sizes":
        sizes = _parse_values("n_scales", args.sizes)
        rows = bench.size_experiment(raw, sizes, cfg.bank, cfg.pursuit, cfg.whitening)
        bench.write_csv(out / "sizes.csv", rows, bench.SIZE_HEADER)
        written.append(out / "sizes.csv")
    elif args.experiment == "orientation":
        result = bench.orientation_experiment(prepared, cfg.bank.fitted(cfg.image_size), cfg.pursuit)
        result.pop("histogram")
        path = out / "orientation.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2)
        written.append(path)

    for path in written:
        write_run_metadata(path, cfg, f"bench {args.experiment}", inputs=[manifest],
                           extra={"pursuit": asdict(cfg.pursuit)})


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "reconstruct": cmd_reconstruct,
    "learn": cmd_learn,
    "stats": cmd_stats,
    "equalize": cmd_equalize,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparselets", description="sparselets: sparse edge coding of natural images")
    parser.add_argument("--config", type=str, help="key = value config file (default: $SPARSELETS_CONFIG)")
    parser.add_argument("--seed", type=int, help="Seed of every random draw")
    parser.add_argument("--workers", type=int, help="Worker count (default: available cores)")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose/debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Render a circle-in-noise stimulus")
    p.add_argument("--radius", type=float, default=64.0)
    p.add_argument("--clutter", type=int, default=0)
    p.add_argument("--circle-scale", type=int, default=2)
    p.add_argument("--size", type=int, help="Image side in pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--envelopes", help="Also write the filter envelope mosaic (PNG)")

    p = sub.add_parser("extract", help="Extract edges from one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--size", type=int, help="Central crop side in pixels")
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-edges", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--prior", help="Chevron histogram guiding the selection")
    p.add_argument("--eta", type=float, help="Strength of the co-occurrence prior")
    p.add_argument("--thetas", help="Orientation set from 'equalize'")
    p.add_argument("--prepared", action="store_true", help="Input is already whitened and masked")
    p.add_argument("--prepared-out", help="Save the whitened, masked input")

    p = sub.add_parser("reconstruct", help="Rebuild an image from an edge file")
    p.add_argument("--edges", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("learn", help="Learn a patch dictionary")
    p.add_argument("--corpus", help="Manifest (default: $SPARSELETS_CORPUS)")
    p.add_argument("--steps", type=int)
    p.add_argument("--atoms", type=int)
    p.add_argument("--homeo", choices=HOMEO_CHOICES)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="Training log CSV")
    p.add_argument("--report", help="Learned vs initial efficiency CSV on the test split")
    p.add_argument("--report-patches", type=int, default=2000)
    p.add_argument("--size", type=int)
    p.add_argument("--skip-bad", action="store_true", help="Skip unreadable corpus entries")

    p = sub.add_parser("stats", help="Edge statistics over a folder of edge files")
    p.add_argument("--edges-dir", required=True)
    p.add_argument("--chevron", help="Chevron histogram output (JSON)")
    p.add_argument("--orientation", help="Orientation histogram output (JSON)")
    p.add_argument("--bins", type=int, help="Orientation bins (default: bank orientations)")
    p.add_argument("--weighting", choices=("modulus", "counts"), default="modulus")

    p = sub.add_parser("equalize", help="Equalized orientation set from a histogram")
    p.add_argument("--hist", required=True)
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="Corpus experiments")
    p.add_argument("experiment", choices=BENCH_EXPERIMENTS)
    p.add_argument("--corpus", help="Manifest (default: $SPARSELETS_CORPUS)")
    p.add_argument("--out", required=True, help="Output folder")
    p.add_argument("--split", choices=("train", "test"), help="Manifest split (default: all)")
    p.add_argument("--size", type=int)
    p.add_argument("--param", choices=("B_f", "B_theta", "n_orientations", "n_scales", "scale_ratio"))
    p.add_argument("--values", help="Comma-separated sweep grid")
    p.add_argument("--sizes", default="64,128,256", help="Comma-separated image sizes")
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-edges", type=int)
    p.add_argument("--skip-bad", action="store_true", help="Skip unreadable corpus entries")
    return parser


def run(argv=None) -> int:
    from engine.config import ConfigError
    from engine.imagecore import ImageLoadError
    from engine.loggabor import AddressError
    from engine.pursuit import EdgeFileError
    from engine.priors import ChevronFileError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    t0 = time.time()
    try:
        cfg = _resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ImageLoadError, EdgeFileError, ChevronFileError, AddressError) as e:
        logger.error("%s", e)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    logger.info("%s done in %.1fs", args.command, time.time() - t0)
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
