"""Command-line front end: dataset generation, fitting, evaluation and export.

Output layout under ``--out``::

    manifest.ini            config, config hash, seed and commands run
    scenes/scene_NNN.txt    scene descriptions
    scans/index.csv         scan name, scene index, pose index
    scans/<scan>.rimg       range image          scans/<scan>.labl  labels
    maps/<scan>.prob        oracle probability maps
    fits/<method>/<scan>.npz  fitted primitives (method: pipeline or baseline)
    reports/<method>.txt|.csv, reports/compare.txt
    export/<scan>_cloud.ply, export/<scan>_<method>.ply
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .bagsio import read_label_map, read_range_image, write_label_map, write_range_image
from .config import ConfigError, ExperimentConfig
from .evaluation import DetectionReport, aggregate_report, comparison_table, match_detections
from .export import label_colors, primitives_to_ply, write_ply
from .geometry import model_from_array
from .pipeline import eransac_baseline, oracle_maps, primitive_fitting, scan_points
from .rangeimage import unproject
from .ransac import Candidate
from .scanner import render_scan
from .scene import PlacementError, PoseConfig, generate_scene, read_scene, sample_scan_poses, write_scene
from .segmentation import argmax_segmentation, read_probability_maps, write_probability_maps

log = logging.getLogger("bagsfit")

METHODS = ("pipeline", "baseline")
N_POSES = 192


class MissingInput(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Seeds and dataset selection


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a tuple of integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def scene_for(seed: int, index: int, max_attempts: int = 20):
    for attempt in range(max_attempts):
        try:
            return generate_scene(derive_seed(seed, index, attempt))
        except PlacementError:
            continue
    raise RuntimeError(f"scene {index}: placement failed {max_attempts} times")


def select_poses(seed: int, scene_index: int, count: int) -> list[int]:
    """Seeded subset of the pose grid, in ascending order."""
    rng = np.random.default_rng(derive_seed(seed, scene_index, 1))
    return sorted(int(i) for i in rng.choice(N_POSES, size=count, replace=False))


def scan_name(scene_index: int, pose_index: int) -> str:
    return f"s{scene_index:03d}_p{pose_index:03d}"


# ---------------------------------------------------------------------------
# Run context


class Run:
    def __init__(self, cfg: ExperimentConfig, out: Path, jobs: int = 1):
        self.cfg = cfg
        self.out = out
        self.jobs = max(1, jobs)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingInput(f"missing {what}: {path}")
        return path

    def scans(self) -> list[tuple[str, int, int]]:
        index = self.require(self.path("scans", "index.csv"), "scan index (run 'scan' first)")
        with open(index, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return [(r["scan"], int(r["scene"]), int(r["pose"])) for r in rows]

    def map(self, fn: Callable, items: Sequence) -> list:
        if self.jobs == 1 or len(items) <= 1:
            return [fn(self, *it) for it in items]
        with ProcessPoolExecutor(self.jobs) as pool:
            return list(pool.map(_call, [(fn, self, it) for it in items]))

    def write_manifest(self, command: str) -> None:
        path = self.path("manifest.ini")
        commands: list[str] = []
        if path.exists():
            old = configparser.ConfigParser(interpolation=None)
            old.read(path)
            if old.has_section("manifest"):
                commands = [c for c in old.get("manifest", "commands", fallback="").split(",") if c]
        if command not in commands:
            commands.append(command)
        self.out.mkdir(parents=True, exist_ok=True)
        head = (
            "[manifest]\n"
            f"version = {__version__}\n"
            f"config_hash = {self.cfg.hash}\n"
            f"seed = {self.cfg.dataset.seed}\n"
            f"commands = {','.join(commands)}\n\n"
        )
        path.write_text(head + self.cfg.to_ini())

    def check_manifest(self) -> None:
        path = self.path("manifest.ini")
        if not path.exists():
            return
        old = configparser.ConfigParser(interpolation=None)
        old.read(path)
        have = old.get("manifest", "config_hash", fallback=None)
        if have and have != self.cfg.hash:
            raise ConfigError(
                f"{path}: output directory holds a run with config hash {have}, "
                f"current config hashes to {self.cfg.hash}; use another --out"
            )


def _call(args):
    fn, run, item = args
    return fn(run, *item)


# ---------------------------------------------------------------------------
# Fits on disk


def save_fits(path: Path, cands: Sequence[Candidate]) -> None:
    pix = [np.asarray(c.pixels if c.pixels is not None else c.inliers, dtype=np.int64) for c in cands]
    np.savez(
        path,
        classes=np.array([int(c.cls) for c in cands], dtype=np.int64),
        params=np.array([c.model.as_array() for c in cands]).reshape(-1, 8),
        scores=np.array([c.score for c in cands], dtype=np.int64),
        converged=np.array([c.refit_converged for c in cands], dtype=bool),
        offsets=np.cumsum([0] + [len(p) for p in pix]).astype(np.int64),
        pixels=np.concatenate(pix) if pix else np.zeros(0, dtype=np.int64),
    )


def load_fits(path: Path) -> list[Candidate]:
    with np.load(path) as z:
        out = []
        for k in range(len(z["classes"])):
            pix = z["pixels"][z["offsets"][k] : z["offsets"][k + 1]]
            model = model_from_array(int(z["classes"][k]), z["params"][k])
            out.append(Candidate(model, int(z["scores"][k]), pix, pix, bool(z["converged"][k])))
        return out


# ---------------------------------------------------------------------------
# Per-item workers (module level so they pickle)


def _scan_one(run: Run, scene_index: int, poses: list[int]):
    scene = read_scene(run.require(run.path("scenes", f"scene_{scene_index:03d}.txt"), "scene"))
    grid = sample_scan_poses(scene, PoseConfig(seed=derive_seed(run.cfg.dataset.seed, scene_index, 2)))
    cfg = run.cfg.scanner_config()
    for p in poses:
        name = scan_name(scene_index, p)
        img, labels = render_scan(scene, grid[p], cfg, seed=derive_seed(run.cfg.dataset.seed, scene_index, p, 3))
        write_range_image(run.path("scans", f"{name}.rimg"), img)
        write_label_map(run.path("scans", f"{name}.labl"), labels)


def _segment_one(run: Run, name: str, scene_index: int, pose: int):
    labels = read_label_map(run.require(run.path("scans", f"{name}.labl"), "label map"))
    corruption = replace(run.cfg.corruption(), seed=derive_seed(run.cfg.segmentation.corruption_seed, scene_index, pose))
    maps = oracle_maps(labels, run.cfg.scheme, corruption)
    write_probability_maps(run.path("maps", f"{name}.prob"), maps)


def _fit_one(run: Run, method: str, name: str, scene_index: int, pose: int):
    img = read_range_image(run.require(run.path("scans", f"{name}.rimg"), "range image"))
    params = run.cfg.ransac_params(seed=derive_seed(run.cfg.dataset.seed, scene_index, pose, 4))
    sp = scan_points(img)
    if method == "baseline":
        cands = eransac_baseline(img, params, sp)
    else:
        valid = img.valid
        maps = read_probability_maps(run.require(run.path("maps", f"{name}.prob"), "probability maps"), valid)
        cands = primitive_fitting(img, maps, params, sp)
    save_fits(run.path("fits", method, f"{name}.npz"), cands)
    return len(cands)


def _eval_one(run: Run, method: str, name: str, scene_index: int, pose: int):
    img = read_range_image(run.require(run.path("scans", f"{name}.rimg"), "range image"))
    labels = read_label_map(run.require(run.path("scans", f"{name}.labl"), "label map"))
    preds = load_fits(run.require(run.path("fits", method, f"{name}.npz"), f"{method} fits"))
    pts, _ = unproject(img)
    return match_detections(preds, labels, pts)[1]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(run: Run, args) -> None:
    run.path("scenes").mkdir(parents=True, exist_ok=True)
    for i in range(run.cfg.dataset.scenes):
        write_scene(run.path("scenes", f"scene_{i:03d}.txt"), scene_for(run.cfg.dataset.seed, i))
    log.info("wrote %d scenes", run.cfg.dataset.scenes)


def cmd_scan(run: Run, args) -> None:
    d = run.cfg.dataset
    for i in range(d.scenes):
        run.require(run.path("scenes", f"scene_{i:03d}.txt"), "scene (run 'gen' first)")
    run.path("scans").mkdir(parents=True, exist_ok=True)
    plan = [(i, select_poses(d.seed, i, d.scans_per_scene)) for i in range(d.scenes)]
    run.map(_scan_one, plan)
    with open(run.path("scans", "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan", "scene", "pose"])
        for i, poses in plan:
            for p in poses:
                w.writerow([scan_name(i, p), i, p])
    log.info("rendered %d scans", d.scenes * d.scans_per_scene)


def cmd_segment(run: Run, args) -> None:
    scans = run.scans()
    run.path("maps").mkdir(parents=True, exist_ok=True)
    run.map(_segment_one, scans)
    log.info("wrote %d probability maps", len(scans))


def cmd_fit(run: Run, args) -> None:
    method = "baseline" if args.baseline else "pipeline"
    scans = run.scans()
    run.path("fits", method).mkdir(parents=True, exist_ok=True)
    counts = run.map(_fit_one, [(method, *s) for s in scans])
    log.info("%s: %d primitives over %d scans", method, sum(counts), len(scans))


def evaluate_method(run: Run, method: str) -> DetectionReport:
    scans = run.scans()
    per_scan = run.map(_eval_one, [(method, *s) for s in scans])
    return aggregate_report(per_scan, method)


def cmd_eval(run: Run, args) -> None:
    methods = [m for m in METHODS if run.path("fits", m).is_dir()]
    if args.baseline:
        methods = ["baseline"]
    if not methods:
        raise MissingInput(f"missing fits: no method directory under {run.path('fits')} (run 'fit' first)")
    if args.compare:
        for m in METHODS:
            run.require(run.path("fits", m), f"{m} fits for --compare")
        methods = list(METHODS)
    run.path("reports").mkdir(parents=True, exist_ok=True)
    reports = []
    for m in methods:
        rep = evaluate_method(run, m)
        run.path("reports", f"{m}.txt").write_text(rep.to_table())
        run.path("reports", f"{m}.csv").write_text(rep.to_csv())
        reports.append(rep)
        print(rep.to_table())
    if args.compare:
        text = comparison_table(reports)
        run.path("reports", "compare.txt").write_text(text)
        print(text)


def cmd_export(run: Run, args) -> None:
    run.path("export").mkdir(parents=True, exist_ok=True)
    for name, scene_index, pose in run.scans():
        img = read_range_image(run.require(run.path("scans", f"{name}.rimg"), "range image"))
        pts, valid = unproject(img)
        map_path = run.path("maps", f"{name}.prob")
        if map_path.exists():
            bags, _ = argmax_segmentation(read_probability_maps(map_path, valid))
        else:
            labels = read_label_map(run.require(run.path("scans", f"{name}.labl"), "label map"))
            bags = oracle_maps(labels, run.cfg.scheme)
            bags, _ = argmax_segmentation(bags)
        colors = label_colors(bags.labels, bags.scheme)
        write_ply(run.path("export", f"{name}_cloud.ply"), pts[valid], colors[valid])
        flat = pts.reshape(-1, 3)
        for m in METHODS:
            fit_path = run.path("fits", m, f"{name}.npz")
            if not fit_path.exists():
                continue
            cands = load_fits(fit_path)
            primitives_to_ply(
                run.path("export", f"{name}_{m}.ply"),
                [c.model for c in cands],
                [flat[c.pixels] for c in cands],
                seed=derive_seed(run.cfg.dataset.seed, scene_index, pose, 5),
            )
    log.info("exported to %s", run.path("export"))


def cmd_all(run: Run, args) -> None:
    for name, fn, extra in (
        ("gen", cmd_gen, {}),
        ("scan", cmd_scan, {}),
        ("segment", cmd_segment, {}),
        ("fit", cmd_fit, {"baseline": False}),
        ("fit --baseline", cmd_fit, {"baseline": True}),
        ("eval --compare", cmd_eval, {"baseline": False, "compare": True}),
    ):
        log.info("== %s", name)
        fn(run, argparse.Namespace(**{**vars(args), **extra}))


COMMANDS = {
    "gen": cmd_gen,
    "scan": cmd_scan,
    "segment": cmd_segment,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export": cmd_export,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (a run manifest works too)")
    common.add_argument("--seed", type=int, help="dataset seed")
    common.add_argument("--scenes", type=int, help="number of scenes")
    common.add_argument("--scans-per-scene", type=int, help="scans per scene (out of 192 poses)")
    common.add_argument("--sigma", type=float, help="depth noise sigma in meters")
    common.add_argument("--scheme", choices=["k4", "k5b", "k5o", "k6"], help="label scheme")
    common.add_argument("--flip-rate", type=float, help="oracle label flip rate")
    common.add_argument("--baseline", action="store_true", help="fit/eval: use the plain RANSAC baseline")
    common.add_argument("--compare", action="store_true", help="eval: compare pipeline and baseline")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", default="bagsfit-run", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="bagsfit", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d, s, g = cfg.dataset, cfg.scanner, cfg.segmentation
    if args.seed is not None:
        d = replace(d, seed=args.seed)
    if args.scenes is not None:
        d = replace(d, scenes=args.scenes)
    if args.scans_per_scene is not None:
        d = replace(d, scans_per_scene=args.scans_per_scene)
    if args.sigma is not None:
        s = replace(s, sigma=args.sigma)
    if args.scheme is not None:
        g = replace(g, scheme=args.scheme)
    if args.flip_rate is not None:
        g = replace(g, flip_rate=args.flip_rate)
    return replace(cfg, dataset=d, scanner=s, segmentation=g).validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(cfg, Path(args.out), args.jobs)
        run.check_manifest()
        COMMANDS[args.command](run, args)
        run.write_manifest(args.command + (" --baseline" if args.baseline else ""))
    except ConfigError as e:
        print(f"bagsfit: config error: {e}", file=sys.stderr)
        return 2
    except MissingInput as e:
        print(f"bagsfit: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
