# Copyright 2024 Xanadu Quantum Technologies Inc.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
The ``dam`` command line: dataset generation, training, explanation, attribution, evaluation and
plotting, all reading from and writing to one run directory.
"""

import functools
import hashlib
import json
import pathlib
import sys
import warnings
from argparse import ArgumentParser, BooleanOptionalAction, Namespace
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from dam.classifier import (
    Classifier,
    make_noised_dataset,
    train_classifier,
    train_noised_classifier,
)
from dam.config import RunConfig, resolve_config
from dam.diffusion import DiffusionModel, train_diffusion
from dam.igd import (
    SaliencySequence,
    completeness_gap,
    emission_steps,
    igd_attribution,
    linear_ig_over_trajectory,
    random_sequence,
)
from dam.metrics import (
    attribution_table,
    evaluate_attribution,
    evaluate_generation,
    generation_table,
)
from dam.plotting import plot_cloud, plot_gallery, plot_saliency_sequence
from dam.pointcloud import (
    LabeledDataset,
    generate_synthetic_dataset,
    load_dataset_archive,
    load_off_directory,
    save_dataset_archive,
    split_dataset,
    toy_specs,
)
from dam.sampler import DiffusionTrajectory, batch_explain, replay, reverse_to_level, sample_seed
from dam.utils.exceptions import (
    CheckpointError,
    InvalidInputError,
    MissingArtifactError,
    NumericalError,
    ParseError,
    UndefinedMetricError,
)
from dam.utils.filesystem import ManifestEntry, RunDirectory
from dam.utils.runtime import RunOptions

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

CHECKPOINTS = {
    "classifier": ("classifier.npz", "train classifier"),
    "noised-classifier": ("noised_classifier.npz", "train noised-classifier"),
    "diffusion": ("diffusion.npz", "train diffusion"),
}

# choices of `explain --init` and `saliency --method`
INIT_FLAGS = {"x": "random_x_then_encode", "z": "random_z"}
SALIENCY_METHODS = {"igd": "igd", "ig": "linear_ig", "linear_ig": "linear_ig", "random": "random"}

# section receiving the generic --seed / --epochs flags of each command
_SEED_SECTION = {
    "gen-data": "data",
    "classifier": "classifier",
    "noised-classifier": "noised",
    "diffusion": "diffusion",
    "explain": "guidance",
    "saliency": "saliency",
    "eval": "metrics",
}


def printerr(*args, **kwargs) -> None:
    """Print arguments to the stderr"""
    print(*args, **kwargs, file=sys.stderr)


def _short_hash(path: pathlib.Path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:12]


def _load_split(run: RunDirectory, split: str) -> LabeledDataset:
    path = run.require("data", f"{split}.dam1", "gen-data")
    names_path = run.require("data", "classes.json", "gen-data")
    with open(names_path, "r", encoding="utf-8") as f:
        names = json.load(f)
    return load_dataset_archive(path, names, split)


def _load_model(run: RunDirectory, name: str):
    filename, producer = CHECKPOINTS[name]
    path = run.require("checkpoints", filename, producer)
    if name == "diffusion":
        return DiffusionModel.load(path)
    return Classifier.load(path)


def _explanations(run: RunDirectory) -> List[ManifestEntry]:
    entries = [
        e for e in run.load_manifest().entries if e.kind == "explanation" and e.status == "ok"
    ]
    if not entries:
        raise MissingArtifactError(
            "The run directory holds no explanations; run `dam explain` first"
        )
    return entries


def _trajectory(run: RunDirectory, entry: ManifestEntry) -> DiffusionTrajectory:
    return DiffusionTrajectory.load(run.root / entry.extra["trajectory"])


def cmd_gen_data(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Generate (or import) the labelled dataset and split it."""
    d = config.data
    if d.source == "off":
        if not d.off_root:
            raise InvalidInputError("data.off_root must name a directory of class subdirectories")
        dataset = load_off_directory(d.off_root, d.n_points, d.seed, d.surface_sampling)
    else:
        dataset = generate_synthetic_dataset(
            toy_specs(d.classes, d.n_points, d.jitter), d.per_class, d.seed
        )
    train, test = split_dataset(dataset, d.test_fraction, d.seed)
    entries = []
    for split in (train, test):
        path = run.path("data", f"{split.split}.dam1")
        save_dataset_archive(split, path)
        entry = ManifestEntry("dataset", run.relative(path), d.seed, config.hash())
        entry.extra = {"split": split.split}
        entries.append(entry)
    with open(run.path("data", "classes.json"), "w", encoding="utf-8") as f:
        json.dump(list(dataset.class_names), f)
    run.record(entries)
    options.log(
        "DATA",
        f"{len(train)} train / {len(test)} test clouds, {dataset.n_classes} classes "
        f"({', '.join(dataset.class_names)}), N={dataset.n_points}",
    )
    return EXIT_OK


def _write_curve(run: RunDirectory, name: str, metrics: Dict[str, Any]) -> None:
    curve = metrics.get("curve")
    if curve:
        pd.DataFrame(curve).to_csv(run.path("reports", f"{name}_curve.csv"), index=False)


def cmd_train(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Train one of the three models."""
    train = _load_split(run, "train")
    test = _load_split(run, "test")
    filename, _ = CHECKPOINTS[a.model]
    progress = run.path("checkpoints", filename.replace(".npz", ".progress.npz"))
    resume_from = progress if a.resume else None
    if a.model == "classifier":
        cfg = config.classifier_config(train.n_classes, train.dim)
        seed = config.classifier.seed
        model = train_classifier(train, cfg, seed, test, options, progress, resume_from)
        if model.metrics["test_accuracy"] < 1.0 / train.n_classes:
            warnings.warn("Classifier accuracy is below chance after training", UserWarning)
    elif a.model == "noised-classifier":
        base = _load_model(run, "classifier")
        n = config.noised
        seed = n.seed
        reverse_fn = None
        trained = run.path("checkpoints", CHECKPOINTS["diffusion"][0]).exists()
        if n.noise_source == "reverse" or trained:
            # the twin follows the schedule of the trained diffusion model when there is one
            diffusion = _load_model(run, "diffusion")
            schedule = diffusion.schedule
            if n.noise_source == "reverse":
                reverse_fn = functools.partial(reverse_to_level, diffusion)
        else:
            cfg = config.diffusion_config(train.n_classes, train.n_points, train.dim)
            schedule = cfg.make_schedule()
        options.log("DATA", f"noising {len(train)} clouds x {n.copies} copies ({n.noise_source})")
        noised_train = make_noised_dataset(
            train, schedule, seed, copies=n.copies, reverse_fn=reverse_fn
        )
        noised_test = make_noised_dataset(test, schedule, seed + 1, reverse_fn=reverse_fn)
        cfg = config.noised_config(base.config, schedule.n_timesteps)
        model = train_noised_classifier(
            base, noised_train, cfg, seed, noised_test, options, progress, resume_from
        )
    else:
        cfg = config.diffusion_config(train.n_classes, train.n_points, train.dim)
        seed = config.diffusion.seed
        model = train_diffusion(train, cfg, seed, options, progress, resume_from)
    path = run.path("checkpoints", filename)
    model.save(path)
    _write_curve(run, a.model.replace("-", "_"), model.metrics)
    extra = {"model": a.model}
    run.record(ManifestEntry("checkpoint", run.relative(path), seed, config.hash(), extra=extra))
    options.log("TRAIN", f"wrote {path}")
    return EXIT_OK


def cmd_explain(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Generate explanations, or replay the recorded ones."""
    model = _load_model(run, "diffusion")
    f = _load_model(run, "classifier")
    guidance = config.guidance_config()
    f_prime = None
    twin = run.path("checkpoints", CHECKPOINTS["noised-classifier"][0])
    if guidance.use_dual or (a.replay and twin.exists()):
        f_prime = _load_model(run, "noised-classifier")
    if a.replay:
        mismatches = replay(model, f, f_prime, run, guidance, options)
        if mismatches:
            printerr(f"{len(mismatches)} explanations did not reproduce: {', '.join(mismatches)}")
            return EXIT_NUMERICAL
        print("replay: all explanations reproduced bitwise")
        return EXIT_OK
    labels = a.labels if a.labels else list(range(model.config.n_classes))
    batch = batch_explain(
        model,
        f,
        f_prime,
        labels,
        config.guidance.per_class,
        guidance,
        run_dir=run,
        config_hash=config.hash(),
        jobs=a.jobs,
        state_stride=config.guidance.state_stride,
        second_label=a.second_label,
        options=options,
    )
    for item in batch.failures:
        printerr(f"label {item.label} sample {item.index} (seed {item.seed}) failed: {item.error}")
    if not batch.succeeded:
        return EXIT_NUMERICAL
    return EXIT_OK


def _saliency_of(method: str, config: RunConfig, f: Classifier, entry, trajectory):
    s = config.saliency
    if method == "igd":
        return igd_attribution(trajectory, s.stride, s.reduction, s.recompute_mode or None, f)
    if method == "linear_ig":
        return linear_ig_over_trajectory(f, trajectory, s.stride, s.ig_steps, s.reduction)
    steps = emission_steps(trajectory.n_timesteps, s.stride)
    seed = sample_seed(s.seed, entry.label, int(entry.extra.get("index", 0)))
    return random_sequence(trajectory.n_points, steps, seed, s.stride)


def cmd_saliency(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Attribute every explanation with the configured method."""
    method = SALIENCY_METHODS.get(config.saliency.method)
    if method is None:
        raise InvalidInputError(f"Unknown attribution method '{config.saliency.method}'")
    f = _load_model(run, "classifier")
    entries = _explanations(run)
    if method == "igd" and config.saliency.recompute_mode:
        thinned = [e.path for e in entries if not _trajectory(run, e).is_complete]
        if thinned:
            raise InvalidInputError(
                f"--recompute-mode needs every trajectory state but {len(thinned)} explanations "
                "kept a thinned trajectory; re-run `dam explain --state-stride 1`"
            )

    def work(entry: ManifestEntry) -> ManifestEntry:
        trajectory = _trajectory(run, entry)
        seq = _saliency_of(method, config, f, entry, trajectory)
        stem = pathlib.Path(entry.path).stem
        path = run.new_path("saliency", f"{stem}.{method}.npz")
        seq.save(path)
        if a.export:
            seq.export(trajectory.x0, run.root / "saliency" / "export", f"{stem}.{method}")
        options.log("SALIENCY", f"{method} of {entry.path}: {len(seq)} maps")
        if method == "linear_ig" and config.saliency.reduction == "sum":
            gap, relative = completeness_gap(f, trajectory, seq)
            options.log(
                "SALIENCY",
                f"completeness of {entry.path}: |sum(psi) - dF| = {gap:.3e} ({relative:.2%})",
            )
        return ManifestEntry(
            "saliency",
            run.relative(path),
            entry.seed,
            config.hash(),
            label=entry.label,
            extra={"method": method, "explanation": entry.path},
        )

    if a.jobs == 1:
        records = [work(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=a.jobs) as executor:
            records = list(executor.map(work, entries))
    run.record(records)
    return EXIT_OK


def _attribution_sets(run: RunDirectory, clouds: Dict[str, Any]) -> Dict[str, Tuple[list, list]]:
    """``{method: (clouds, sequences)}`` of the latest saliency of every explanation."""
    latest: Dict[Tuple[str, str], ManifestEntry] = {}
    for entry in run.load_manifest().entries:
        if entry.kind == "saliency" and entry.extra.get("explanation") in clouds:
            latest[(entry.extra["method"], entry.extra["explanation"])] = entry
    sets: Dict[str, Tuple[list, list]] = {}
    for (method, explanation), entry in sorted(latest.items()):
        group = sets.setdefault(method, ([], []))
        group[0].append(clouds[explanation])
        group[1].append(SaliencySequence.load(run.root / entry.path))
    return sets


def cmd_eval(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Score the explanations and their saliency maps."""
    m = config.metrics
    f = _load_model(run, "classifier")
    test = _load_split(run, "test")
    entries = _explanations(run)
    clouds = {e.path: _trajectory(run, e).x0 for e in entries}
    real, real_labels = test.stacked()
    report = evaluate_generation(
        [clouds[e.path] for e in entries],
        [e.label for e in entries],
        real,
        real_labels,
        f,
        m.real_per_class,
        m.symmetric_cd,
        m.full_covariance,
        m.seed,
    )
    sets = _attribution_sets(run, clouds)
    if m.faithfulness and not sets:
        raise MissingArtifactError("Faithfulness needs saliency maps; run `dam saliency` first")
    summaries = []
    for method, (method_clouds, sequences) in sets.items():
        summary = evaluate_attribution(
            f, method_clouds, sequences, method, m.ablation, m.faithfulness_j
        )
        summaries.append(summary)
        report.attribution[method] = {k: v for k, v in summary.to_dict().items() if k != "method"}
        options.log("EVAL", f"{method}: S^1.0={summary.s_full:.4f} L_SC={summary.l_sc:.4f}")
    report.provenance = {
        "config_hash": config.hash(),
        "dataset_hash": _short_hash(run.path("data", "train.dam1")),
        "classifier_hash": _short_hash(run.path("checkpoints", CHECKPOINTS["classifier"][0])),
        "seeds": ",".join(str(e.seed) for e in entries),
    }
    report.check()
    path = run.new_path("reports", "metrics.json")
    with open(path, "w", encoding="utf-8") as f_out:
        json.dump(report.to_dict(), f_out, indent=2)
    generation_table([report]).to_csv(run.path("reports", "generation.csv"), index=False)
    if summaries:
        attribution_table(summaries).to_csv(run.path("reports", "attribution.csv"), index=False)
    run.record(ManifestEntry("report", run.relative(path), m.seed, config.hash()))
    print(generation_table([report]).to_string(index=False))
    if summaries:
        print(attribution_table(summaries).to_string(index=False))
    if m.faithfulness:
        for summary in summaries:
            print(f"{summary.method}: S^0.5 = {summary.s_half:.4f}  S^1.0 = {summary.s_full:.4f}")
    return EXIT_OK


def cmd_plot(a: Namespace, run: RunDirectory, config: RunConfig, options: RunOptions) -> int:
    """Render explanations and saliency sequences."""
    entries = _explanations(run)
    directory = run.root / "reports" / "plots"
    directory.mkdir(parents=True, exist_ok=True)
    clouds = {e.path: _trajectory(run, e).x0 for e in entries}
    for entry in entries:
        plot_cloud(clouds[entry.path], directory / f"{pathlib.Path(entry.path).stem}.png")
    plot_gallery(
        [clouds[e.path] for e in entries],
        [f"label {e.label}" for e in entries],
        directory / "gallery.png",
    )
    for method, (method_clouds, sequences) in _attribution_sets(run, clouds).items():
        for k, (cloud, seq) in enumerate(zip(method_clouds, sequences)):
            plot_saliency_sequence(cloud, seq, directory / f"{method}_{k}.png", title=method)
    options.log("RUN", f"plots written to {directory}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "saliency": cmd_saliency,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> ArgumentParser:
    """The ``dam`` argument parser."""
    # fmt: off
    ap = ArgumentParser(prog="dam",
                        description="Diffusion-based explanations of point-cloud classifiers",
                        epilog="Exit codes: 0 - success, 2 - invalid input, 3 - missing artifact, "
                        "4 - numerical failure or replay mismatch")
    ap.add_argument("--run-dir", type=str, default=None, metavar="DIR",
                    help="Run directory (default - $DAM_RUN_DIR or ./dam_run)")
    ap.add_argument("--config", type=str, default=None, metavar="FILE.toml",
                    help="Config file (default - the run directory's config.resolved)")
    ap.add_argument("--quiet", default=False, action=BooleanOptionalAction,
                    help="Suppress progress records")
    apcmds = ap.add_subparsers(help="command help", dest="command")

    gencmd = apcmds.add_parser("gen-data", help="Generate and split the labelled dataset")
    gencmd.add_argument("--classes", type=int, dest="data.classes", metavar="INT",
                        help="Number of synthetic shape classes")
    gencmd.add_argument("--per-class", type=int, dest="data.per_class", metavar="INT",
                        help="Clouds per class")
    gencmd.add_argument("--n", "--points", type=int, dest="data.n_points", metavar="INT",
                        help="Points per cloud")
    gencmd.add_argument("--source", type=str, dest="data.source", choices=["synthetic", "off"],
                        help="Synthetic shapes or a directory of OFF meshes")
    gencmd.add_argument("--toy", action="store_const", const="synthetic", dest="data.source",
                        help="Synthetic shapes, same as --source synthetic")
    gencmd.add_argument("--surface-sampling", default=None, dest="data.surface_sampling",
                        action=BooleanOptionalAction,
                        help="Sample OFF meshes on their faces instead of their vertices")
    gencmd.add_argument("--off-root", type=str, dest="data.off_root", metavar="DIR",
                        help="Directory of <class>/*.off meshes")
    gencmd.add_argument("--seed", type=int, metavar="INT", help="Seed")

    traincmd = apcmds.add_parser("train", help="Train a model",
                                 epilog="Order: classifier, diffusion, noised-classifier")
    traincmd.add_argument("model", choices=sorted(CHECKPOINTS), help="Model to train")
    traincmd.add_argument("--epochs", type=int, metavar="INT", help="Classifier epochs")
    traincmd.add_argument("--iterations", type=int, dest="diffusion.iterations", metavar="INT",
                          help="Diffusion optimization steps")
    traincmd.add_argument("--timesteps", type=int, dest="diffusion.n_timesteps", metavar="INT",
                          help="Diffusion length T")
    traincmd.add_argument("--schedule", type=str, dest="diffusion.schedule",
                          choices=["cosine", "linear"], help="Noise schedule")
    traincmd.add_argument("--noise-source", type=str, dest="noised.noise_source",
                          choices=["closed_form", "reverse"],
                          help="How noised training clouds are produced")
    traincmd.add_argument("--tnet", default=None, dest="classifier.use_tnet",
                          action=BooleanOptionalAction, help="Input alignment network")
    traincmd.add_argument("--seed", type=int, metavar="INT", help="Seed")
    traincmd.add_argument("--resume", default=False, action=BooleanOptionalAction,
                          help="Continue from the last progress checkpoint")

    explcmd = apcmds.add_parser("explain", help="Generate explanations")
    explcmd.add_argument("--class", "--labels", type=int, nargs="+", dest="labels",
                         metavar="INT", help="Classes to explain (default - all)")
    explcmd.add_argument("--second-class", "--second-label", type=int, default=None,
                         dest="second_label", metavar="INT",
                         help="Explain every class jointly with this one")
    explcmd.add_argument("--count", "--per-class", type=int, dest="guidance.per_class",
                         metavar="INT", help="Explanations per class")
    explcmd.add_argument("--scale", type=float, dest="guidance.scale", metavar="FLOAT",
                         help="Guidance scale")
    explcmd.add_argument("--weight-shape", type=str, dest="guidance.weight_shape",
                         choices=["linear", "cosine", "step"], help="Guidance weight schedule")
    explcmd.add_argument("--activation", type=str, dest="guidance.activation",
                         choices=["logits", "softmax", "log_softmax"],
                         help="Target activation mode")
    explcmd.add_argument("--dual", default=None, dest="guidance.use_dual",
                         action=BooleanOptionalAction, help="Blend in the noise-aware classifier")
    explcmd.add_argument("--init", type=str, choices=sorted(INIT_FLAGS),
                         help="Latent initialization - encode a random cloud (x) or draw z")
    explcmd.add_argument("--target-layer", "--target", type=str, dest="guidance.target",
                         metavar="LAYER[:INDEX]",
                         help="Unit to maximize (default - the class output)")
    explcmd.add_argument("--state-stride", type=int, dest="guidance.state_stride", metavar="INT",
                         help="Keep every k-th trajectory state")
    explcmd.add_argument("--seed", type=int, metavar="INT", help="Base seed")
    explcmd.add_argument("--jobs", type=int, default=1, metavar="INT",
                         help="Concurrent samples (default - 1)")
    explcmd.add_argument("--replay", default=False, action=BooleanOptionalAction,
                         help="Re-run the manifest's explanations and compare bitwise")

    salcmd = apcmds.add_parser("saliency", help="Attribute the explanations")
    salcmd.add_argument("--method", type=str, dest="saliency.method",
                        choices=["igd", "ig", "random"],
                        help="Attribution method (ig - straight-line integrated gradients)")
    salcmd.add_argument("--stride", type=int, dest="saliency.stride", metavar="INT",
                        help="Emit a map every k steps")
    salcmd.add_argument("--steps", "--ig-steps", type=int, dest="saliency.ig_steps",
                        metavar="INT",
                        help="Quadrature points of straight-line integrated gradients")
    salcmd.add_argument("--reduction", type=str, dest="saliency.reduction",
                        choices=["sum", "abs", "norm"], help="Coordinate-to-point reduction")
    salcmd.add_argument("--recompute-mode", type=str, dest="saliency.recompute_mode",
                        choices=["logits", "softmax", "log_softmax"],
                        help="Recompute the path gradients in this activation mode")
    salcmd.add_argument("--export", default=False, action=BooleanOptionalAction,
                        help="Also write PLY and CSV files")
    salcmd.add_argument("--seed", type=int, metavar="INT", help="Seed of random attributions")
    salcmd.add_argument("--jobs", type=int, default=1, metavar="INT",
                        help="Concurrent explanations (default - 1)")

    evalcmd = apcmds.add_parser("eval", help="Score explanations and saliency maps")
    evalcmd.add_argument("--real-per-class", type=int, dest="metrics.real_per_class", metavar="INT",
                         help="Real clouds compared against every explanation")
    evalcmd.add_argument("--symmetric-cd", default=None, dest="metrics.symmetric_cd",
                         action=BooleanOptionalAction, help="Average both Chamfer directions")
    evalcmd.add_argument("--full-covariance", default=None, dest="metrics.full_covariance",
                         action=BooleanOptionalAction, help="Full-covariance FID")
    evalcmd.add_argument("--ablation", type=str, dest="metrics.ablation",
                         choices=["centroid", "delete"], help="How ablated points are removed")
    evalcmd.add_argument("--faithfulness", default=None, dest="metrics.faithfulness",
                         action=BooleanOptionalAction,
                         help="Require saliency maps and print S^0.5 and S^1.0 per method")
    evalcmd.add_argument("--j", type=float, dest="metrics.faithfulness_j", metavar="FLOAT",
                         help="Largest ablated fraction")
    evalcmd.add_argument("--seed", type=int, metavar="INT", help="Seed of the real-cloud draw")

    apcmds.add_parser("plot", help="Render explanations and saliency maps")
    # fmt: on
    return ap


def _overrides(a: Namespace) -> Dict[str, Any]:
    overrides = {k: v for k, v in vars(a).items() if "." in k and v is not None}
    section = _SEED_SECTION.get(getattr(a, "model", None) or a.command)
    if getattr(a, "seed", None) is not None and section is not None:
        overrides[f"{section}.seed"] = a.seed
    if getattr(a, "epochs", None) is not None:
        if a.model not in ("classifier", "noised-classifier"):
            raise InvalidInputError("--epochs applies to the classifiers; use --iterations")
        overrides[f"{section}.epochs"] = a.epochs
    if getattr(a, "init", None) is not None:
        overrides["guidance.init_mode"] = INIT_FLAGS[a.init]
    if overrides.get("saliency.method") is not None:
        overrides["saliency.method"] = SALIENCY_METHODS[overrides["saliency.method"]]
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the ``dam`` command; returns the exit code."""
    ap = build_parser()
    a = ap.parse_args(argv)
    if a.command is None:
        ap.print_help(sys.stderr)
        return EXIT_USAGE
    run = RunDirectory(a.run_dir)
    options = RunOptions(verbose=not a.quiet, logfile=sys.stderr)
    try:
        if a.config is not None and not pathlib.Path(a.config).is_file():
            raise InvalidInputError(f"Config file {a.config} does not exist")
        config = resolve_config(a.config, run.config_path, _overrides(a))
        run.create()
        snapshot = run.write_snapshot(config.dumps(), config.hash())
        if snapshot is not None:
            entry = ManifestEntry("config", run.relative(snapshot), 0, config.hash())
            entry.extra = {"command": a.command}
            run.record(entry)
            options.log("RUN", f"config {config.hash()} differs from config.resolved: {snapshot}")
        options.log("RUN", f"{a.command} in {run} (config {config.hash()})")
        return COMMANDS[a.command](a, run, config, options)
    except (MissingArtifactError, CheckpointError) as e:
        printerr(f"error: {e}")
        return EXIT_MISSING
    except (InvalidInputError, ParseError, UndefinedMetricError) as e:
        printerr(f"error: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        printerr(f"error: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
