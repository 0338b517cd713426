"""Two-phase training, final boundary fit, scoring and the search loop.

Phase one trains the autoencoder with the guided loss (a per-batch QP
inside the objective); phase two throws the decoder away, encodes the
full undivided training set once and fits a single one-class boundary on
it. Scoring then goes through one of four method ids:

    ae-recons     plain AE, mean squared reconstruction error
    ae-ocsvm      plain AE encoder + final boundary fit
    ogae-recons   guided AE, mean squared reconstruction error
    ogae-ocsvm    guided AE encoder + final boundary fit

"ae-*" is exactly the lam = 0 configuration of the guided trainer, same
seeds and batching, so the decoupled baseline shares every code path.

All scores follow higher = more anomalous; boundary scores are -f(z).

Reproducibility contract: every stochastic choice derives from the config
seed and every array op runs at pinned batch/block sizes, so rerunning a
manifest reproduces the metric block bit-exactly on one platform.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataFormatError, NumericError, ShapeError, UsageError
from .guidance import GuidanceConfig, default_schedule, latent_spread, ogae_loss, split_batch
from .kernels import KernelSpec, default_gamma, gram
from .metrics import evaluate_scores
from .nets import Adam, Autoencoder, AutoencoderSpec, load_checkpoint, save_checkpoint
from .ocsvm import OcsvmSolution, OcsvmSpec, decision, solve_dual

logger = logging.getLogger(__name__)

METHODS = ("ae-recons", "ae-ocsvm", "ogae-recons", "ogae-ocsvm")

# Constant-beta strategies; "expand-then-mix" derives its schedule from
# the epoch count at train time.
BETA_STRATEGIES = ("expander", "compactor", "mix", "expand-then-mix")

ENCODE_BATCH = 256  # pinned everywhere: BLAS kernels are shape-dependent
SPREAD_SAMPLES = 512


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer and final fit need, JSON-round-trippable."""

    architecture: str = "digit-ae"
    latent_dim: int = 0  # 0 = architecture default
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    lam: float = 50.0
    beta_strategy: str = "expand-then-mix"
    expander_through_qp: bool = True
    nu: float = 0.1
    gamma: float | None = None  # None = 1/latent_dim
    scale_latents: bool = False
    max_skip_fraction: float = 0.2

    def __post_init__(self):
        if self.beta_strategy not in BETA_STRATEGIES:
            raise UsageError(
                f"unknown beta strategy {self.beta_strategy!r}, expected one of {BETA_STRATEGIES}"
            )
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4:
            raise UsageError(f"batch_size must be >= 4, got {self.batch_size}")
        if not (0.0 <= self.max_skip_fraction <= 1.0):
            raise UsageError(f"max_skip_fraction must be in [0, 1], got {self.max_skip_fraction}")

    def guidance(self) -> GuidanceConfig:
        if self.beta_strategy == "expander":
            return GuidanceConfig(self.lam, 1.0, 0.0, None, self.expander_through_qp)
        if self.beta_strategy == "compactor":
            return GuidanceConfig(self.lam, 0.0, 1.0, None, self.expander_through_qp)
        if self.beta_strategy == "mix":
            return GuidanceConfig(self.lam, 0.5, 0.5, None, self.expander_through_qp)
        return GuidanceConfig(
            self.lam, 1.0, 0.0, default_schedule(self.epochs), self.expander_through_qp
        )

    def kernel_for(self, latent_dim: int) -> KernelSpec:
        return KernelSpec(gamma=self.gamma if self.gamma is not None else default_gamma(latent_dim))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "latent_dim": self.latent_dim,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "patience": self.patience,
            "lam": self.lam,
            "beta_strategy": self.beta_strategy,
            "expander_through_qp": self.expander_through_qp,
            "nu": self.nu,
            "gamma": self.gamma,
            "scale_latents": self.scale_latents,
            "max_skip_fraction": self.max_skip_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise UsageError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: Autoencoder
    log: list[dict]
    best_epoch: int
    stopped_epoch: int
    wall_clock: float


def _as_nchw(x: np.ndarray, hw: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != hw or x.shape[3] != hw:
        raise ShapeError(f"expected (N, {hw}, {hw}) or (N, 1, {hw}, {hw}) images, got {x.shape}")
    return x


def _batch_slices(n: int, batch: int):
    for start in range(0, n, batch):
        yield slice(start, min(start + batch, n))


def _heldout_loss(model: Autoencoder, x_early: np.ndarray, gcfg: GuidanceConfig,
                  kspec: KernelSpec, nu: float, batch: int) -> float:
    """Forward-only total loss on the early-stop split (eval-mode BN).

    The penalty's forward value does not depend on the betas or routing,
    so this number is comparable across schedule phases.
    """
    total = 0.0
    for sl in _batch_slices(x_early.shape[0], batch):
        xb = ad.Tensor(x_early[sl])
        z = model.encode(xb, training=False)
        x_hat = model.decode(z, training=False)
        split = split_batch(z) if (gcfg.lam > 0.0 and z.shape[0] >= 4) else None
        if gcfg.lam > 0.0 and split is None:
            loss, _ = ogae_loss(xb, x_hat, None, replace(gcfg, lam=0.0), None, None)
        else:
            loss, _ = ogae_loss(xb, x_hat, split, gcfg, kspec, nu)
        total += float(loss.data)
    return total


def train_ogae(x_train: np.ndarray, x_early: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Train the autoencoder with the guided loss and early stopping.

    Batches reshuffle every epoch from the master seed, so the positional
    SVM/penalty halves see fresh pairings each epoch. A batch whose QP
    fails falls back to its reconstruction term; more than
    ``max_skip_fraction`` of an epoch's batches failing aborts training.

    Early stopping watches the held-out total loss with the configured
    patience and restores the best epoch's weights (and batch-norm
    statistics), so the returned model never postdates the minimum.
    """
    t0 = time.monotonic()
    spec = AutoencoderSpec(architecture=cfg.architecture, latent_dim=cfg.latent_dim, seed=cfg.seed)
    model = Autoencoder(spec)
    hw = model.spec.input_hw
    x_train = _as_nchw(x_train, hw)
    x_early = _as_nchw(x_early, hw)
    if x_train.shape[0] < 4:
        raise UsageError(f"need at least 4 training images, got {x_train.shape[0]}")
    if x_early.shape[0] < 1:
        raise UsageError("early-stop split is empty")

    gcfg = cfg.guidance()
    kspec = cfg.kernel_for(model.spec.latent_dim)
    opt = Adam(model.parameters(), lr=cfg.lr)

    log: list[dict] = []
    best = (np.inf, -1, None)  # (held-out loss, epoch, state)
    stopped = cfg.epochs - 1
    n = x_train.shape[0]
    spread_x = x_early[: min(SPREAD_SAMPLES, x_early.shape[0])]

    for epoch in range(cfg.epochs):
        ecfg = gcfg.at_epoch(epoch)
        order = np.random.default_rng((cfg.seed, 1000 + epoch)).permutation(n)
        recon_sum = 0.0
        penalty_sum = 0.0
        skipped = 0
        batches = 0
        for sl in _batch_slices(n, cfg.batch_size):
            idx = order[sl.start : sl.stop]
            if len(idx) < 4:
                continue  # too small to split; identical drop rule at lam = 0
            xb = ad.Tensor(x_train[idx])
            z = model.encode(xb, training=True)
            x_hat = model.decode(z, training=True)
            split = split_batch(z) if gcfg.lam > 0.0 else None
            loss, diag = ogae_loss(xb, x_hat, split, ecfg, kspec, cfg.nu)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batches += 1
            penalty_sum += diag["penalty"]
            recon_sum += float(loss.data) - ecfg.lam * diag["penalty"]
            if diag["skipped"]:
                skipped += 1
        if batches == 0:
            raise UsageError("no trainable batches (all smaller than 4)")
        if skipped > cfg.max_skip_fraction * batches:
            raise NumericError(
                f"epoch {epoch}: {skipped}/{batches} batches lost their QP "
                f"(> {cfg.max_skip_fraction:.0%} allowed); training aborted"
            )

        early_loss = _heldout_loss(model, x_early, ecfg, kspec, cfg.nu, cfg.batch_size)
        spread = latent_spread(model.encode_array(spread_x, batch=ENCODE_BATCH))
        log.append(
            {
                "epoch": epoch,
                "beta1": ecfg.beta1,
                "beta2": ecfg.beta2,
                "train_recon": recon_sum,
                "train_penalty": penalty_sum,
                "train_total": recon_sum + ecfg.lam * penalty_sum,
                "skipped_batches": skipped,
                "batches": batches,
                "heldout_loss": early_loss,
                "latent_spread": spread,
            }
        )
        logger.info(
            "epoch %d: recon %.4g penalty %.4g heldout %.4g spread %.4g (skipped %d/%d)",
            epoch, recon_sum, penalty_sum, early_loss, spread, skipped, batches,
        )
        if early_loss < best[0]:
            best = (early_loss, epoch, model.clone_state())
        elif epoch - best[1] >= cfg.patience:
            stopped = epoch
            logger.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
        stopped = epoch

    if best[2] is not None:
        model.restore_state(best[2])
    return TrainResult(
        model=model,
        log=log,
        best_epoch=best[1],
        stopped_epoch=stopped,
        wall_clock=time.monotonic() - t0,
    )


# ---------------------------------------------------------------------------
# final boundary fit
# ---------------------------------------------------------------------------

def _latent_fingerprint(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class FinalFit:
    """Frozen scoring artifacts: boundary, kernel, latents, optional scaler."""

    solution: OcsvmSolution
    kspec: KernelSpec
    nu: float
    z_train: np.ndarray
    scaler_mean: np.ndarray | None = None
    scaler_std: np.ndarray | None = None

    def apply_scaler(self, z: np.ndarray) -> np.ndarray:
        if self.scaler_mean is None:
            return z
        return (z - self.scaler_mean) / self.scaler_std

    def to_dict(self) -> dict:
        return {
            "solution": self.solution.to_dict(),
            "kernel": self.kspec.to_dict(),
            "nu": float(self.nu),
            "latent_dim": int(self.z_train.shape[1]),
            "latent_fingerprint": _latent_fingerprint(self.z_train),
            "scaler_mean": None if self.scaler_mean is None else [float(v) for v in self.scaler_mean],
            "scaler_std": None if self.scaler_std is None else [float(v) for v in self.scaler_std],
        }

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(prefix)
        json_path = prefix.with_suffix(".json")
        npy_path = prefix.parent / (prefix.name + "-latents.npy")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        np.save(npy_path, self.z_train)
        return json_path, npy_path

    @classmethod
    def load(cls, prefix: str | Path) -> "FinalFit":
        prefix = Path(prefix)
        json_path = prefix.with_suffix(".json")
        npy_path = prefix.parent / (prefix.name + "-latents.npy")
        if not json_path.exists() or not npy_path.exists():
            raise UsageError(f"missing boundary-fit artifacts at {prefix}(.json/-latents.npy)")
        d = json.loads(json_path.read_text())
        z = np.load(npy_path, allow_pickle=False).astype(np.float64)
        if _latent_fingerprint(z) != d["latent_fingerprint"]:
            raise DataFormatError(f"{npy_path}: latent array does not match recorded fingerprint")
        if z.ndim != 2 or z.shape[1] != d["latent_dim"]:
            raise DataFormatError(f"{npy_path}: latent shape {z.shape} disagrees with record")
        return cls(
            solution=OcsvmSolution.from_dict(d["solution"]),
            kspec=KernelSpec.from_dict(d["kernel"]),
            nu=float(d["nu"]),
            z_train=z,
            scaler_mean=None if d["scaler_mean"] is None else np.asarray(d["scaler_mean"]),
            scaler_std=None if d["scaler_std"] is None else np.asarray(d["scaler_std"]),
        )


def fit_final_ocsvm(
    model: Autoencoder,
    x_full: np.ndarray,
    nu: float,
    gamma: float | None = None,
    scale_latents: bool = False,
) -> FinalFit:
    """Encode the whole undivided normal set and solve one boundary on it.

    Solver failures propagate; there is no skip policy at the final fit.
    The optional per-dimension standardization is fitted here and frozen
    into the returned artifacts.
    """
    x_full = _as_nchw(x_full, model.spec.input_hw)
    z = model.encode_array(x_full, batch=ENCODE_BATCH)
    mean = std = None
    if scale_latents:
        mean = z.mean(axis=0)
        std = z.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        z = (z - mean) / std
    kspec = KernelSpec(gamma=gamma if gamma is not None else default_gamma(z.shape[1]))
    k = gram(z, kspec)
    sol = solve_dual(k, OcsvmSpec(nu=nu, n=z.shape[0]))
    del k
    return FinalFit(
        solution=sol, kspec=kspec, nu=nu, z_train=z, scaler_mean=mean, scaler_std=std
    )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def score_samples(
    method: str,
    model: Autoencoder,
    fit: FinalFit | None,
    x: np.ndarray,
) -> np.ndarray:
    """Per-sample anomaly scores for one method (higher = more anomalous).

    Reconstruction methods return the mean squared error per sample;
    boundary methods return -f(z).
    """
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}, expected one of {METHODS}")
    x = _as_nchw(x, model.spec.input_hw)
    if method.endswith("-recons"):
        out = np.empty(x.shape[0])
        for sl in _batch_slices(x.shape[0], ENCODE_BATCH):
            xb = ad.Tensor(x[sl])
            z = model.encode(xb, training=False)
            x_hat = model.decode(z, training=False)
            err = (x[sl] - x_hat.data) ** 2
            out[sl] = err.reshape(err.shape[0], -1).mean(axis=1)
    else:
        if fit is None:
            raise UsageError(f"{method} requires a fitted boundary (none given)")
        z = model.encode_array(x, batch=ENCODE_BATCH)
        z = fit.apply_scaler(z)
        out = -decision(fit.solution, fit.z_train, fit.kspec, z)
    if not np.isfinite(out).all():
        raise NumericError(f"{method} produced non-finite scores")
    return out


# ---------------------------------------------------------------------------
# manifests and the four-method benchmark
# ---------------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    """Self-sufficient record of one method's run.

    ``metrics`` is the bit-exact part of the reproducibility contract;
    wall-clock and artifact hashes document the run without entering the
    rerun comparison.
    """

    method: str
    config: dict
    split_fingerprints: dict
    metrics: dict
    wall_clock: float
    artifacts: dict = field(default_factory=dict)
    version: int = 1

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "method": self.method,
            "config": self.config,
            "split_fingerprints": self.split_fingerprints,
            "metrics": self.metrics,
            "wall_clock": self.wall_clock,
            "artifacts": self.artifacts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        try:
            d = json.loads(text)
            return cls(
                method=d["method"],
                config=d["config"],
                split_fingerprints=d["split_fingerprints"],
                metrics=d["metrics"],
                wall_clock=float(d["wall_clock"]),
                artifacts=d.get("artifacts", {}),
                version=int(d.get("version", 1)),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"malformed manifest: {exc}") from exc


@dataclass
class BenchmarkResult:
    methods: tuple[str, ...]
    val_labels: np.ndarray
    test_labels: np.ndarray
    val_ids: list[str]
    test_ids: list[str]
    scores: dict  # method -> {"val": array, "test": array}
    metrics: dict  # method -> {"val": {...}, "test": {...}}
    manifests: dict  # method -> ExperimentManifest
    models: dict  # prefix ("ae"/"ogae") -> Autoencoder
    fits: dict  # prefix -> FinalFit
    logs: dict  # prefix -> list of per-epoch dicts


def run_benchmark(
    splits: dict,
    cfg: TrainConfig,
    normal_digit: int = 3,
    methods: tuple[str, ...] = METHODS,
) -> BenchmarkResult:
    """Train, fit, score and evaluate the requested methods on one split set.

    The "ae" model is cfg with lam = 0 and the "ogae" model is cfg as
    given; both train from the same seed on the same batches. The final
    boundary is fitted on the undivided normal set (train + earlystop).
    """
    from .data import binary_labels  # local import: data does not depend on pipeline

    for name in ("train", "earlystop", "val", "test"):
        if name not in splits:
            raise UsageError(f"splits are missing {name!r}")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    if set(splits["train"].digit_labels) != {normal_digit}:
        raise UsageError("training split must contain only the normal digit")

    x_train = splits["train"].images
    x_early = splits["earlystop"].images
    x_full = np.concatenate([x_train, x_early])
    val, test = splits["val"], splits["test"]
    fingerprints = {name: splits[name].fingerprint() for name in ("train", "earlystop", "val", "test")}

    prefixes = sorted({m.split("-")[0] for m in methods})
    models, fits, logs, times = {}, {}, {}, {}
    for prefix in prefixes:
        tc = replace(cfg, lam=0.0) if prefix == "ae" else cfg
        t0 = time.monotonic()
        tr = train_ogae(x_train, x_early, tc)
        need_fit = any(m == f"{prefix}-ocsvm" for m in methods)
        fits[prefix] = (
            fit_final_ocsvm(tr.model, x_full, nu=tc.nu, gamma=tc.gamma,
                            scale_latents=tc.scale_latents)
            if need_fit
            else None
        )
        models[prefix] = tr.model
        logs[prefix] = tr.log
        times[prefix] = time.monotonic() - t0

    val_y = binary_labels(val, normal_digit)
    test_y = binary_labels(test, normal_digit)
    scores, metrics, manifests = {}, {}, {}
    for method in methods:
        prefix = method.split("-")[0]
        t0 = time.monotonic()
        sv = score_samples(method, models[prefix], fits[prefix], val.images)
        st = score_samples(method, models[prefix], fits[prefix], test.images)
        scores[method] = {"val": sv, "test": st}
        metrics[method] = {
            "val": evaluate_scores(val_y, sv),
            "test": evaluate_scores(test_y, st),
        }
        tc = replace(cfg, lam=0.0) if prefix == "ae" else cfg
        manifests[method] = ExperimentManifest(
            method=method,
            config=tc.to_dict(),
            split_fingerprints=fingerprints,
            metrics=metrics[method],
            wall_clock=times[prefix] + (time.monotonic() - t0),
        )
    return BenchmarkResult(
        methods=tuple(methods),
        val_labels=val_y,
        test_labels=test_y,
        val_ids=val.ids(),
        test_ids=test.ids(),
        scores=scores,
        metrics=metrics,
        manifests=manifests,
        models=models,
        fits=fits,
        logs=logs,
    )


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

def _search_cell(args: tuple) -> dict:
    """One grid cell: train, fit, score validation. Top-level for pickling."""
    cfg_dict, method, x_train, x_early, val_images, val_labels = args
    cfg = TrainConfig.from_dict(cfg_dict)
    tc = replace(cfg, lam=0.0) if method.startswith("ae-") else cfg
    tr = train_ogae(x_train, x_early, tc)
    fit = (
        fit_final_ocsvm(tr.model, np.concatenate([x_train, x_early]), nu=tc.nu,
                        gamma=tc.gamma, scale_latents=tc.scale_latents)
        if method.endswith("-ocsvm")
        else None
    )
    sv = score_samples(method, tr.model, fit, val_images)
    m = evaluate_scores(val_labels, sv)
    return {"config": cfg.to_dict(), "val_auroc": m["auroc"], "val_aupr": m["aupr"]}


@dataclass
class SearchResult:
    best: TrainConfig
    records: list[dict]


def hyperparameter_search(
    grid: list[TrainConfig],
    x_train: np.ndarray,
    x_early: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    method: str = "ogae-ocsvm",
    jobs: int = 1,
) -> SearchResult:
    """Exhaustive grid evaluation by validation AUROC.

    Ties break by AUPR, then by smaller lam, then by grid order. Cells
    are independent and deterministic; ``jobs`` > 1 fans them out to
    worker processes.
    """
    if not grid:
        raise UsageError("hyperparameter grid is empty")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    work = [
        (cfg.to_dict(), method, x_train, x_early, val_images, val_labels) for cfg in grid
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_search_cell, work))
    else:
        records = [_search_cell(w) for w in work]
    order = sorted(
        range(len(records)),
        key=lambda i: (-records[i]["val_auroc"], -records[i]["val_aupr"],
                       records[i]["config"]["lam"], i),
    )
    for rank, i in enumerate(order):
        records[i]["rank"] = rank
    best = TrainConfig.from_dict(records[order[0]]["config"])
    logger.info("grid search: best of %d cells has val AUROC %.4f",
                len(grid), records[order[0]]["val_auroc"])
    return SearchResult(best=best, records=records)


# ---------------------------------------------------------------------------
# patch-based maps
# ---------------------------------------------------------------------------

def patch_anomaly_map(model: Autoencoder, fit: FinalFit, image: np.ndarray) -> np.ndarray:
    """Boundary score (-f) of every stride-1 patch, placed at its center.

    Border pixels whose patch would leave the image hold NaN and are
    excluded from every aggregation.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got {image.shape}")
    p = model.spec.input_hw
    h, w = image.shape
    if h < p or w < p:
        raise UsageError(f"image {h}x{w} is smaller than the {p}x{p} patch")
    windows = np.lib.stride_tricks.sliding_window_view(image, (p, p))
    gh, gw = windows.shape[:2]
    patches = np.ascontiguousarray(windows.reshape(gh * gw, 1, p, p))
    z = model.encode_array(patches, batch=ENCODE_BATCH)
    z = fit.apply_scaler(z)
    scores = -decision(fit.solution, fit.z_train, fit.kspec, z)
    out = np.full((h, w), np.nan)
    r = p // 2
    out[r : r + gh, r : r + gw] = scores.reshape(gh, gw)
    return out


def aggregate_patch_map(score_map: np.ndarray, mask: np.ndarray | None = None,
                        q: float = 0.02) -> float:
    """Quantile summary of a score map, skipping NaN and masked pixels.

    The default reproduces the benchmark's rule: the value below which 2%
    of the (unmasked) scores fall.
    """
    score_map = np.asarray(score_map, dtype=np.float64)
    keep = np.isfinite(score_map)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != score_map.shape:
            raise ShapeError(f"mask {mask.shape} does not match map {score_map.shape}")
        keep &= ~mask
    vals = score_map[keep]
    if vals.size == 0:
        raise UsageError("no finite unmasked pixels to aggregate")
    if not (0.0 <= q <= 1.0):
        raise UsageError(f"quantile must be in [0, 1], got {q}")
    return float(np.quantile(vals, q))


# ---------------------------------------------------------------------------
# artifact helpers shared with the CLI
# ---------------------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_artifacts(out_dir: str | Path, prefix: str, model: Autoencoder,
                   fit: FinalFit | None) -> dict:
    """Write checkpoint (+ boundary fit) and return their content hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{prefix}-model.ckpt"
    save_checkpoint(model, ckpt)
    hashes = {ckpt.name: sha256_file(ckpt)}
    if fit is not None:
        jp, npz = fit.save(out_dir / f"{prefix}-boundary")
        hashes[jp.name] = sha256_file(jp)
        hashes[npz.name] = sha256_file(npz)
    return hashes


def load_artifacts(out_dir: str | Path, prefix: str, need_fit: bool):
    out_dir = Path(out_dir)
    ckpt = out_dir / f"{prefix}-model.ckpt"
    if not ckpt.exists():
        raise UsageError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    fit = None
    if need_fit:
        fit = FinalFit.load(out_dir / f"{prefix}-boundary")
    return model, fit
