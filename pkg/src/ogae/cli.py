"""Command-line front end.

Stages share one output directory and hand artifacts forward through it:

    corrupt   -> splits/            (NPY caches + index with hashes)
    train     -> {ae,ogae}-model.ckpt + training logs
    fit-svm   -> {ae,ogae}-boundary.json / -latents.npy
    score     -> scores/{method}-{split}.csv   (id,label,score)
    evaluate  -> evaluation.json               (metrics + paired bootstrap)
    report    -> report.txt / report.csv / figures/*.png

Every stage writes a manifest under manifests/ before exiting 0; the
report stage refuses inputs whose hashes no longer match the manifests.
Exit codes: 0 ok, 2 usage or missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    binary_labels,
    build_experiment1_splits,
    load_idx,
    load_split_dir,
    save_split_dir,
)
from .errors import NumericError, UsageError
from .metrics import METRICS, evaluate_scores, paired_bootstrap
from .pipeline import (
    METHODS,
    TrainConfig,
    fit_final_ocsvm,
    hyperparameter_search,
    load_artifacts,
    save_artifacts,
    score_samples,
    sha256_file,
    train_ogae,
)
from .report import render_table, save_figures, write_table_csv
from .synth import synthetic_archives

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "data": {
        "source": "synthetic",  # or "mnist"
        "mnist_dir": None,
        "factor": 1.0,
        "normal_digit": 3,
        "outlier_digit": 8,
        "strict_counts": None,  # None = strict for mnist / full-size synthetic
        "seed": 0,
    },
    "train": {},  # TrainConfig overrides
    "prefixes": ["ae", "ogae"],
    "grid": [],  # optional list of train-section overrides to search
    "score": {"methods": list(METHODS), "splits": ["val", "test"]},
    "evaluate": {
        "split": "test",
        "methods": list(METHODS),
        "metrics": ["auroc", "aupr", "auroc30"],
        "n_resamples": 1000,
        "alpha": 0.01,
        "seed": 0,
    },
}

_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def load_config(path: str | None, seed: int | None) -> dict:
    """Merge a JSON config over the defaults; --seed overrides every stage."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise UsageError(f"{p}: top level must be an object")
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for section, value in user.items():
            if isinstance(cfg[section], dict):
                if not isinstance(value, dict):
                    raise UsageError(f"config section {section!r} must be an object")
                bad = set(value) - set(cfg[section]) if section != "train" else set()
                if bad:
                    raise UsageError(f"unknown keys in config section {section!r}: {sorted(bad)}")
                cfg[section].update(value)
            else:
                cfg[section] = value
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["evaluate"]["seed"] = seed
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def _write_run_manifest(out: Path, name: str, cfg: dict, outputs: dict,
                        extra: dict | None = None, t0: float = 0.0) -> Path:
    mdir = out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "tool_version": __version__,
        "subcommand": name,
        "config": cfg,
        "outputs": outputs,
        "wall_clock": time.monotonic() - t0 if t0 else None,
    }
    if extra:
        payload.update(extra)
    path = mdir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _load_run_manifest(out: Path, name: str) -> dict:
    path = out / "manifests" / f"{name}.json"
    if not path.exists():
        raise UsageError(f"missing manifest {path} (run the {name} step first)")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _resolve_mnist(directory: str | None) -> dict[str, Path]:
    if directory is None:
        raise UsageError("data.source is 'mnist' but data.mnist_dir is not set")
    d = Path(directory)
    found = {}
    for key, base in _MNIST_FILES.items():
        for candidate in (d / base, d / (base + ".gz")):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            raise UsageError(f"missing digit archive file {base}(.gz) under {d}")
    return found


def cmd_corrupt(out: Path, cfg: dict) -> int:
    t0 = time.monotonic()
    dc = cfg["data"]
    normal, outlier = int(dc["normal_digit"]), int(dc["outlier_digit"])
    if dc["source"] == "mnist":
        files = _resolve_mnist(dc["mnist_dir"])
        train_arch = load_idx(files["train_images"], files["train_labels"], origin="mnist-train")
        test_arch = load_idx(files["test_images"], files["test_labels"], origin="mnist-test")
        strict = True if dc["strict_counts"] is None else bool(dc["strict_counts"])
    elif dc["source"] == "synthetic":
        train_arch, test_arch = synthetic_archives(
            digits=(normal, outlier), factor=float(dc["factor"]), seed=int(dc["seed"])
        )
        strict = (
            float(dc["factor"]) == 1.0
            if dc["strict_counts"] is None
            else bool(dc["strict_counts"])
        )
    else:
        raise UsageError(f"unknown data.source {dc['source']!r} (expected mnist or synthetic)")
    splits = build_experiment1_splits(
        train_arch,
        test_arch,
        normal_digit=normal,
        outlier_digit=outlier,
        seed=int(dc["seed"]),
        strict_counts=strict,
    )
    index = save_split_dir(out / "splits", splits)
    for name, meta in index.items():
        logger.info("split %s: %d images (%s)", name, meta["n"], meta["fingerprint"][:12])
    _write_run_manifest(out, "corrupt", cfg, outputs=index, t0=t0)
    return 0


def cmd_train(out: Path, cfg: dict, jobs: int) -> int:
    t0 = time.monotonic()
    splits = load_split_dir(out / "splits")
    x_train, x_early = splits["train"].images, splits["earlystop"].images
    base = _train_config(cfg)

    search_records = None
    if cfg["grid"]:
        grid = []
        for overrides in cfg["grid"]:
            merged = dict(cfg["train"])
            merged.update(overrides)
            grid.append(TrainConfig.from_dict(merged))
        result = hyperparameter_search(
            grid,
            x_train,
            x_early,
            splits["val"].images,
            binary_labels(splits["val"], int(cfg["data"]["normal_digit"])),
            method="ogae-ocsvm",
            jobs=jobs,
        )
        base = result.best
        search_records = result.records
        logger.info("grid search selected %s", base.to_dict())

    outputs = {}
    for prefix in cfg["prefixes"]:
        if prefix not in ("ae", "ogae"):
            raise UsageError(f"unknown model prefix {prefix!r} (expected ae or ogae)")
        tc = base if prefix == "ogae" else TrainConfig.from_dict({**base.to_dict(), "lam": 0.0})
        res = train_ogae(x_train, x_early, tc)
        outputs.update(save_artifacts(out, prefix, res.model, None))
        log_path = out / f"{prefix}-train-log.json"
        log_path.write_text(
            json.dumps(
                {
                    "config": tc.to_dict(),
                    "best_epoch": res.best_epoch,
                    "stopped_epoch": res.stopped_epoch,
                    "epochs": res.log,
                },
                indent=2,
            )
        )
        outputs[log_path.name] = sha256_file(log_path)
        logger.info("%s: best epoch %d, stopped %d", prefix, res.best_epoch, res.stopped_epoch)
    extra = {"selected_config": base.to_dict()}
    if search_records is not None:
        extra["search_records"] = search_records
    _write_run_manifest(out, "train", cfg, outputs=outputs, extra=extra, t0=t0)
    return 0


def cmd_fit_svm(out: Path, cfg: dict) -> int:
    t0 = time.monotonic()
    splits = load_split_dir(out / "splits")
    x_full = np.concatenate([splits["train"].images, splits["earlystop"].images])
    selected = _load_run_manifest(out, "train").get("selected_config", cfg["train"])
    tc = TrainConfig.from_dict(selected)
    outputs = {}
    for prefix in cfg["prefixes"]:
        model, _ = load_artifacts(out, prefix, need_fit=False)
        fit = fit_final_ocsvm(
            model, x_full, nu=tc.nu, gamma=tc.gamma, scale_latents=tc.scale_latents
        )
        outputs.update(save_artifacts(out, prefix, model, fit))
        logger.info(
            "%s boundary: rho %.6f, %d SVs of %d",
            prefix, fit.solution.rho, int((fit.solution.alpha > 0).sum()), len(fit.solution.alpha),
        )
    _write_run_manifest(out, "fit-svm", cfg, outputs=outputs, t0=t0)
    return 0


def _write_scores_csv(path: Path, ids: list[str], labels: np.ndarray,
                      scores: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "score"])
        for i, y, s in zip(ids, labels, scores):
            w.writerow([i, int(y), repr(float(s))])


def _read_scores_csv(path: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    if not path.exists():
        raise UsageError(f"missing scores file {path} (run the score step first)")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "label", "score"]:
        raise UsageError(f"{path}: expected header id,label,score")
    ids = [r[0] for r in rows[1:]]
    labels = np.array([int(r[1]) for r in rows[1:]], dtype=np.int64)
    scores = np.array([float(r[2]) for r in rows[1:]], dtype=np.float64)
    return ids, labels, scores


def cmd_score(out: Path, cfg: dict) -> int:
    t0 = time.monotonic()
    splits = load_split_dir(out / "splits")
    normal = int(cfg["data"]["normal_digit"])
    sdir = out / "scores"
    sdir.mkdir(parents=True, exist_ok=True)
    methods = cfg["score"]["methods"]
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown score methods {sorted(unknown)}")
    cache = {}
    outputs = {}
    for method in methods:
        prefix = method.split("-")[0]
        if prefix not in cache:
            cache[prefix] = {}
        need_fit = method.endswith("-ocsvm")
        key = "fit" if need_fit else "plain"
        if key not in cache[prefix]:
            cache[prefix][key] = load_artifacts(out, prefix, need_fit=need_fit)
        model, fit = cache[prefix][key]
        for split_name in cfg["score"]["splits"]:
            if split_name not in splits:
                raise UsageError(f"unknown split {split_name!r}")
            s = splits[split_name]
            scores = score_samples(method, model, fit, s.images)
            path = sdir / f"{method}-{split_name}.csv"
            _write_scores_csv(path, s.ids(), binary_labels(s, normal), scores)
            outputs[path.name] = sha256_file(path)
            logger.info("scored %s on %s (%d rows)", method, split_name, len(s))
    _write_run_manifest(out, "score", cfg, outputs=outputs, t0=t0)
    return 0


def cmd_evaluate(out: Path, cfg: dict) -> int:
    t0 = time.monotonic()
    ec = cfg["evaluate"]
    split_name = ec["split"]
    methods = ec["methods"]
    if not methods:
        raise UsageError("evaluate.methods is empty")
    for m in ec["metrics"]:
        if m not in METRICS:
            raise UsageError(f"unknown metric {m!r}, expected one of {sorted(METRICS)}")
    sdir = out / "scores"
    ids_ref = None
    labels = None
    scores_by_method = {}
    score_hashes = {}
    for method in methods:
        path = sdir / f"{method}-{split_name}.csv"
        ids, lab, sc = _read_scores_csv(path)
        if ids_ref is None:
            ids_ref, labels = ids, lab
        elif ids != ids_ref or not np.array_equal(lab, labels):
            raise UsageError(f"{path}: rows do not line up with {methods[0]} scores")
        scores_by_method[method] = sc
        score_hashes[path.name] = sha256_file(path)

    point = {m: evaluate_scores(labels, s) for m, s in scores_by_method.items()}
    bootstrap = {}
    if len(methods) >= 2:
        for metric in ec["metrics"]:
            rep = paired_bootstrap(
                scores_by_method,
                labels,
                metric=metric,
                n_resamples=int(ec["n_resamples"]),
                seed=int(ec["seed"]),
                alpha=float(ec["alpha"]),
            )
            bootstrap[metric] = rep.to_dict()
    payload = {
        "split": split_name,
        "methods": methods,
        "point": point,
        "bootstrap": bootstrap,
        "score_files": score_hashes,
    }
    eval_path = out / "evaluation.json"
    eval_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_run_manifest(
        out, "evaluate", cfg, outputs={eval_path.name: sha256_file(eval_path)}, t0=t0
    )
    for m in methods:
        logger.info("%s: %s", m, {k: round(v, 4) for k, v in point[m].items()})
    return 0


def cmd_report(out: Path, cfg: dict) -> int:
    t0 = time.monotonic()
    eval_path = out / "evaluation.json"
    if not eval_path.exists():
        raise UsageError(f"missing {eval_path} (run the evaluate step first)")
    eval_manifest = _load_run_manifest(out, "evaluate")
    recorded = eval_manifest["outputs"].get(eval_path.name)
    if recorded != sha256_file(eval_path):
        raise UsageError(f"{eval_path} does not match the hash in its manifest; refusing to report")
    payload = json.loads(eval_path.read_text())

    scores_by_method = {}
    labels = None
    for method in payload["methods"]:
        path = out / "scores" / f"{method}-{payload['split']}.csv"
        if sha256_file(path) != payload["score_files"].get(path.name):
            raise UsageError(f"{path} changed since evaluation; refusing to report")
        _, labels, sc = _read_scores_csv(path)
        scores_by_method[method] = sc

    from .metrics import BootstrapReport

    bootstrap = {
        metric: BootstrapReport(
            metric=d["metric"],
            point=d["point"],
            best=d["best"],
            p_values=d["p_values"],
            threshold=d["threshold"],
            n_resamples=d["n_resamples"],
            seed=d["seed"],
            bold=set(d["bold"]),
            underline=set(d["underline"]),
        )
        for metric, d in payload["bootstrap"].items()
    }
    metrics_order = tuple(cfg["evaluate"]["metrics"])
    table = render_table(payload["point"], bootstrap, metrics=metrics_order)
    txt_path = out / "report.txt"
    txt_path.write_text(table)
    csv_path = out / "report.csv"
    write_table_csv(csv_path, payload["point"], bootstrap, metrics=metrics_order)

    logs = {}
    for prefix in cfg["prefixes"]:
        lp = out / f"{prefix}-train-log.json"
        if lp.exists():
            logs[prefix] = json.loads(lp.read_text())["epochs"]
    figures = save_figures(out / "figures", labels, scores_by_method, logs or None)

    outputs = {txt_path.name: sha256_file(txt_path), csv_path.name: sha256_file(csv_path)}
    for f in figures:
        outputs[f"figures/{f.name}"] = sha256_file(f)
    _write_run_manifest(out, "report", cfg, outputs=outputs, t0=t0)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ogae",
        description="Boundary-guided autoencoder anomaly detection benchmark",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("corrupt", "build the corrupted train/val/test splits"),
        ("train", "train the plain and guided autoencoders"),
        ("fit-svm", "fit the final one-class boundary on encoded training data"),
        ("score", "write per-sample anomaly scores as CSV"),
        ("evaluate", "compute metrics and the paired bootstrap comparison"),
        ("report", "render the comparison table and figures"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default="ogae-out", help="shared output directory")
        p.add_argument("--seed", type=int, default=None, help="override every configured seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for grid search")
        p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "corrupt":
            return cmd_corrupt(out, cfg)
        if args.subcommand == "train":
            return cmd_train(out, cfg, jobs=args.jobs)
        if args.subcommand == "fit-svm":
            return cmd_fit_svm(out, cfg)
        if args.subcommand == "score":
            return cmd_score(out, cfg)
        if args.subcommand == "evaluate":
            return cmd_evaluate(out, cfg)
        if args.subcommand == "report":
            return cmd_report(out, cfg)
        raise UsageError(f"unhandled subcommand {args.subcommand!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        detail = ""
        gap = getattr(exc, "gap", None)
        if gap is not None:
            detail = f" (residual {gap:.3g} after {getattr(exc, 'iterations', '?')} iterations)"
        print(f"numeric failure: {exc}{detail}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
