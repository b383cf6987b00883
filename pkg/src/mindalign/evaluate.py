"""Measurement protocols: retrieval, two-way identification, image metrics,
brain correlation via an encoding model, the reconstruction path with 4:1
blending, and the data-scaling experiment with its normalized curves.

All protocols are read-only over a trained model and a dataset's shared test
split. Scaling curves are normalized so 0 is the random-image baseline and 1
is the full-data pretrained model.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeds
from .errors import ConfigError, DataError
from .flatkv import format_flat
from .model import (
    ModelParams,
    backbone_forward,
    lowlevel_forward,
    prior_sample,
    retrieval_project,
    ridge_forward,
    target_embed,
)
from .train import TrainConfig, finetune, pretrain, train_from_scratch
from .world import (
    SubjectDataset,
    WorldSpec,
    _smooth_images,
    token_targets,
)

CORE_METRICS = ("image_retrieval", "brain_retrieval", "pixcorr", "ssim",
                "twoway_low", "twoway_high")


@dataclass(frozen=True)
class EvalConfig:
    pool_size: int = 50
    repetitions: int = 30
    seed: int = 0
    include_brain_corr: bool = False

    def validate(self, n_test: int | None = None) -> None:
        if self.pool_size < 2 or self.repetitions < 1:
            raise ConfigError("pool_size must be >= 2 and repetitions >= 1")
        if n_test is not None and self.pool_size > n_test:
            raise ConfigError(f"pool_size {self.pool_size} exceeds test set "
                              f"size {n_test}")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    protocol: dict[str, object]
    config_echo: dict[str, object] = field(default_factory=dict)

    def to_text(self) -> str:
        items: dict[str, object] = {}
        for k, v in sorted(self.metrics.items()):
            items[f"metric.{k}"] = f"{v:.6g}"
        for k, v in self.protocol.items():
            items[f"protocol.{k}"] = v
        items.update(self.config_echo)
        return format_flat(items)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


# -- image metrics ---------------------------------------------------------


def pixcorr(recon: np.ndarray, truth: np.ndarray) -> float:
    """Pearson correlation over flattened pixels; 0 for a constant image."""
    a = np.asarray(recon, dtype=np.float64).reshape(-1)
    b = np.asarray(truth, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError("pixcorr inputs must have equal size")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        return 0.0
    return float((ac * bc).sum() / denom)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    c = (size - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    w = np.exp(-((ii - c) ** 2 + (jj - c) ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(recon: np.ndarray, truth: np.ndarray, window: int = 8,
         sigma: float = 1.5, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Structural similarity with a gaussian window, averaged over all valid
    window positions and channels. Inputs are [H, W, C] in [0, 1]."""
    a = np.asarray(recon, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise DataError("ssim expects two equal-shape [H, W, C] images")
    if a.shape[0] < window or a.shape[1] < window:
        raise DataError(f"image smaller than the {window}x{window} ssim window")
    w = _gaussian_window(window, sigma)
    from numpy.lib.stride_tricks import sliding_window_view

    total = 0.0
    count = 0
    for c in range(a.shape[2]):
        wa = sliding_window_view(a[:, :, c], (window, window))
        wb = sliding_window_view(b[:, :, c], (window, window))
        mu_x = np.tensordot(wa, w, axes=([2, 3], [0, 1]))
        mu_y = np.tensordot(wb, w, axes=([2, 3], [0, 1]))
        dx = wa - mu_x[..., None, None]
        dy = wb - mu_y[..., None, None]
        var_x = np.tensordot(dx * dx, w, axes=([2, 3], [0, 1]))
        var_y = np.tensordot(dy * dy, w, axes=([2, 3], [0, 1]))
        cov = np.tensordot(dx * dy, w, axes=([2, 3], [0, 1]))
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
        total += s.sum()
        count += s.size
    return float(total / count)


def box_blur(image: np.ndarray, k: int = 4) -> np.ndarray:
    """Valid-mode k x k box average per channel."""
    a = np.asarray(image, dtype=np.float64)
    from numpy.lib.stride_tricks import sliding_window_view

    out = np.empty((a.shape[0] - k + 1, a.shape[1] - k + 1, a.shape[2]))
    for c in range(a.shape[2]):
        out[:, :, c] = sliding_window_view(a[:, :, c], (k, k)).mean(axis=(2, 3))
    return out


# -- protocols --------------------------------------------------------------


def retrieval_eval(retr_embeddings: np.ndarray, target_embeddings: np.ndarray,
                   pool_size: int = 50, repetitions: int = 30,
                   seed: int = 0) -> dict[str, float]:
    """Top-1 cosine retrieval in both directions over random candidate pools.

    For every test item and repetition, the item competes against
    pool_size - 1 other randomly drawn candidates; scores are averaged over
    items then repetitions. Chance is 1/pool_size.
    """
    emb = np.asarray(retr_embeddings, dtype=np.float64)
    temb = np.asarray(target_embeddings, dtype=np.float64)
    n = emb.shape[0]
    if temb.shape[0] != n:
        raise DataError("embedding sets must pair one-to-one")
    if pool_size > n:
        raise DataError(f"pool_size {pool_size} larger than test set {n}")
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    temb = temb / np.maximum(np.linalg.norm(temb, axis=1, keepdims=True), 1e-12)
    sims = emb @ temb.T  # rows: brain, cols: image
    rng = seeds.rng(seed, "retrieval-pools")
    image_acc = np.zeros(repetitions)
    brain_acc = np.zeros(repetitions)
    for rep in range(repetitions):
        img_hits = 0
        brain_hits = 0
        for i in range(n):
            if pool_size == n:
                others = np.delete(np.arange(n), i)
            else:
                pool = rng.choice(n - 1, size=pool_size - 1, replace=False)
                others = np.where(pool >= i, pool + 1, pool)
            img_hits += sims[i, i] > sims[i, others].max()
            brain_hits += sims[i, i] > sims[others, i].max()
        image_acc[rep] = img_hits / n
        brain_acc[rep] = brain_hits / n
    return {"image_retrieval": float(image_acc.mean()),
            "brain_retrieval": float(brain_acc.mean())}


def _feature_matrix(images: np.ndarray, feature_map, world: WorldSpec) -> np.ndarray:
    if feature_map == "lowlevel":
        return np.stack([box_blur(img).reshape(-1) for img in images])
    if feature_map == "highlevel":
        return token_targets(world, images)
    if callable(feature_map):
        return np.stack([np.asarray(feature_map(img)).reshape(-1) for img in images])
    raise ConfigError(f"unknown feature map {feature_map!r}")


def two_way_identification(recons: np.ndarray, truths: np.ndarray,
                           feature_map, world: WorldSpec | None = None) -> float:
    """Fraction of pairwise comparisons won by the matching reconstruction.

    For every item, its truth features are correlated with its own recon
    features and with every other recon; each strictly greater own-match is a
    win. Chance is 0.5.
    """
    n = recons.shape[0]
    if n < 2:
        raise DataError("two-way identification needs at least 2 items")
    ft = _feature_matrix(truths, feature_map, world)
    fr = _feature_matrix(recons, feature_map, world)
    ft = ft - ft.mean(axis=1, keepdims=True)
    fr = fr - fr.mean(axis=1, keepdims=True)
    ft_norm = np.linalg.norm(ft, axis=1)
    fr_norm = np.linalg.norm(fr, axis=1)
    if np.any(ft_norm == 0) or np.any(fr_norm == 0):
        raise DataError("degenerate constant features")
    corr = (ft / ft_norm[:, None]) @ (fr / fr_norm[:, None]).T
    own = np.diag(corr)
    wins = (own[:, None] > corr).sum(axis=1)  # own > corr[i, i] is False
    return float((wins / (n - 1)).mean())


@dataclass
class EncodingModel:
    """Linear map images -> voxels used to score reconstructions.

    Either the world's true forward model (oracle) or a ridge regression fit
    on the training split with the regularizer chosen by generalized
    cross-validation, one strength per region.
    """

    weights: np.ndarray            # [n_voxels, pixel_dim]
    intercept: np.ndarray          # [n_voxels]
    regions: dict[str, np.ndarray]
    reg_strength: dict[str, float]

    @classmethod
    def oracle(cls, world: WorldSpec, subject_id: str) -> "EncodingModel":
        fm = world.subjects.get(subject_id)
        if fm is None:
            raise DataError(f"unknown subject {subject_id!r}")
        return cls(weights=fm.matrix.copy(), intercept=np.zeros(fm.n_voxels),
                   regions=world.regions[subject_id],
                   reg_strength={r: 0.0 for r in world.regions[subject_id]})

    @classmethod
    def fit(cls, images: np.ndarray, voxels: np.ndarray,
            regions: dict[str, np.ndarray],
            lambdas: np.ndarray | None = None) -> "EncodingModel":
        X = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
        Y = np.asarray(voxels, dtype=np.float64)
        if X.shape[0] != Y.shape[0]:
            raise DataError("images and voxels must pair one-to-one")
        if lambdas is None:
            lambdas = np.logspace(-6, 4, 21)
        x_mean = X.mean(axis=0)
        Xc = X - x_mean
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        n = X.shape[0]
        weights = np.zeros((Y.shape[1], X.shape[1]))
        intercept = np.zeros(Y.shape[1])
        strengths: dict[str, float] = {}
        # GCV degenerates at interpolation (centered X and Y share a
        # hyperplane, so the residual vanishes faster than the df penalty);
        # candidates that nearly exhaust the degrees of freedom are skipped
        max_edf = 0.98 * min(n - 1, s.size)
        for name, idx in regions.items():
            Yr = Y[:, idx]
            y_mean = Yr.mean(axis=0)
            Yc = Yr - y_mean
            UtY = U.T @ Yc
            best_lam, best_gcv = None, np.inf
            for lam in lambdas:
                shrink = s * s / (s * s + lam)
                edf = shrink.sum()
                if edf > max_edf:
                    continue
                resid = Yc - U @ (shrink[:, None] * UtY)
                gcv = (resid ** 2).sum() / n / (1.0 - edf / n) ** 2
                if gcv < best_gcv:
                    best_gcv, best_lam = gcv, float(lam)
            if best_lam is None:
                best_lam = float(lambdas[-1])
            coef = Vt.T @ ((s / (s * s + best_lam))[:, None] * UtY)
            weights[idx] = coef.T
            intercept[idx] = y_mean - x_mean @ coef
            strengths[name] = best_lam
        return cls(weights=weights, intercept=intercept, regions=regions,
                   reg_strength=strengths)

    @classmethod
    def fit_from_dataset(cls, world: WorldSpec, dataset: SubjectDataset) -> "EncodingModel":
        # the training split only; the shared test split must stay unseen
        mask = dataset.train_mask
        images = world.images[dataset.image_ids[mask]]
        return cls.fit(images, dataset.voxels[mask],
                       world.regions[dataset.subject_id])

    def predict(self, images: np.ndarray) -> np.ndarray:
        X = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
        return X @ self.weights.T + self.intercept


def brain_correlation(recons: np.ndarray, true_voxels: np.ndarray,
                      enc: EncodingModel,
                      regions: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """Mean per-voxel correlation between predicted and true activity, by region."""
    regions = enc.regions if regions is None else regions
    preds = enc.predict(recons)
    if preds.shape != np.asarray(true_voxels).shape:
        raise DataError("prediction/voxel shape mismatch")
    pc = preds - preds.mean(axis=0)
    tc = true_voxels - np.asarray(true_voxels).mean(axis=0)
    denom = np.sqrt((pc * pc).sum(axis=0) * (tc * tc).sum(axis=0))
    r = np.zeros(preds.shape[1])
    ok = denom > 0
    r[ok] = (pc * tc).sum(axis=0)[ok] / denom[ok]
    out = {}
    for name, idx in regions.items():
        if idx.size == 0:
            raise DataError(f"region {name} has no voxels")
        out[name] = float(r[idx].mean())
    out["all"] = float(r.mean())
    return out


# -- image serialization ------------------------------------------------------


def save_image(path: Path, image: np.ndarray) -> None:
    """Write a [H, W, 3] image in [0, 1] as binary PPM (P6, 8-bit) with a raw
    little-endian f32 sidecar (`<path>.f32`) for lossless metric computation."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError("PPM serialization needs an [H, W, 3] image")
    h, w, _ = img.shape
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())
    np.asarray(img, dtype="<f4").tofile(path.with_suffix(path.suffix + ".f32"))


def load_image_sidecar(path: Path) -> np.ndarray:
    """Read the lossless f32 sidecar back using the PPM header for the shape."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM")
        w, h = (int(tok) for tok in fh.readline().split())
    arr = np.fromfile(path.with_suffix(path.suffix + ".f32"), dtype="<f4")
    if arr.size != h * w * 3:
        raise DataError(f"{path}: sidecar has {arr.size} floats, expected {h * w * 3}")
    return arr.reshape(h, w, 3).astype(np.float64)


# -- reconstruction ----------------------------------------------------------


def blend_images(unrefined: np.ndarray, lowlevel_px: np.ndarray) -> np.ndarray:
    """4:1 weighted average of the two reconstruction routes."""
    return (4.0 * unrefined + lowlevel_px) / 5.0


def reconstruct(mp: ModelParams, world: WorldSpec, voxels: np.ndarray,
                subject_id: str, seed: int) -> dict[str, np.ndarray]:
    """Full inference path: prior sampling, analytic decode, 4:1 blend.

    Returns unrefined (decoded prior samples), lowlevel (decoded low-level
    latents), and final (clipped blend), each [B, H, W, C].
    """
    cfg = world.config
    vox = np.atleast_2d(np.asarray(voxels, dtype=np.float64))
    cond = backbone_forward(mp, ridge_forward(mp, subject_id, vox))
    tok = prior_sample(mp, cond, seed=seed)
    n = vox.shape[0]
    unrefined = (tok.reshape(n, -1) @ world.decoder.T).reshape(
        n, cfg.image_hw, cfg.image_hw, cfg.channels)
    vae_pred, _ = lowlevel_forward(mp, cond)
    lowlevel_px = (vae_pred.data.reshape(n, -1) @ world.vae_pinv.T).reshape(
        n, cfg.image_hw, cfg.image_hw, cfg.channels)
    final = np.clip(blend_images(unrefined, lowlevel_px), 0.0, 1.0)
    return {"unrefined": unrefined, "lowlevel": lowlevel_px, "final": final}


# -- whole-model evaluation ---------------------------------------------------


def evaluate_model(mp: ModelParams, world: WorldSpec, dataset: SubjectDataset,
                   eval_cfg: EvalConfig, include_reconstruction: bool = True) -> EvalReport:
    """Score a model on a subject's shared test split.

    Reconstruction-dependent metrics are reported only when the prior is
    available (``include_reconstruction``); retrieval always is.
    """
    sid = dataset.subject_id
    test_vox = dataset.shared_voxels()
    n_test = test_vox.shape[0]
    eval_cfg.validate(n_test)
    test_imgs = world.images[dataset.image_ids[dataset.is_shared]]

    emb = retrieval_project(mp, backbone_forward(mp, ridge_forward(mp, sid, test_vox)))
    temb = target_embed(mp, token_targets(world, test_imgs))
    metrics = dict(retrieval_eval(emb.data, temb, eval_cfg.pool_size,
                                  eval_cfg.repetitions,
                                  seed=seeds.derive(eval_cfg.seed, "retrieval")))

    if include_reconstruction:
        recs = reconstruct(mp, world, test_vox, sid,
                           seed=seeds.derive(eval_cfg.seed, "recon"))
        final = recs["final"]
        metrics["pixcorr"] = float(np.mean(
            [pixcorr(final[i], test_imgs[i]) for i in range(n_test)]))
        metrics["ssim"] = float(np.mean(
            [ssim(final[i], test_imgs[i]) for i in range(n_test)]))
        metrics["twoway_low"] = two_way_identification(final, test_imgs,
                                                       "lowlevel", world)
        metrics["twoway_high"] = two_way_identification(final, test_imgs,
                                                        "highlevel", world)
        if eval_cfg.include_brain_corr:
            enc = EncodingModel.fit_from_dataset(world, dataset)
            for region, r in brain_correlation(final, test_vox, enc).items():
                metrics[f"brain_corr_{region}"] = r

    protocol = {"pool_size": eval_cfg.pool_size,
                "repetitions": eval_cfg.repetitions,
                "seed": eval_cfg.seed,
                "chance": 1.0 / eval_cfg.pool_size,
                "n_test": n_test}
    return EvalReport(metrics=metrics, protocol=protocol)


def random_baseline_report(world: WorldSpec, dataset: SubjectDataset,
                           eval_cfg: EvalConfig) -> EvalReport:
    """Metrics with fresh random images standing in as reconstructions.

    Retrieval has no image-based analog, so it anchors at chance.
    """
    test_imgs = world.images[dataset.image_ids[dataset.is_shared]]
    n = test_imgs.shape[0]
    eval_cfg.validate(n)
    rand_imgs = _smooth_images(n, world.config,
                               seeds.rng(eval_cfg.seed, "baseline-images"))
    metrics = {
        "image_retrieval": 1.0 / eval_cfg.pool_size,
        "brain_retrieval": 1.0 / eval_cfg.pool_size,
        "pixcorr": float(np.mean([pixcorr(rand_imgs[i], test_imgs[i])
                                  for i in range(n)])),
        "ssim": float(np.mean([ssim(rand_imgs[i], test_imgs[i])
                               for i in range(n)])),
        "twoway_low": two_way_identification(rand_imgs, test_imgs, "lowlevel", world),
        "twoway_high": two_way_identification(rand_imgs, test_imgs, "highlevel", world),
    }
    protocol = {"pool_size": eval_cfg.pool_size, "repetitions": eval_cfg.repetitions,
                "seed": eval_cfg.seed, "chance": 1.0 / eval_cfg.pool_size,
                "n_test": n}
    return EvalReport(metrics=metrics, protocol=protocol)


# -- scaling experiment -------------------------------------------------------


@dataclass
class ScalingResult:
    arms: dict[str, dict[int, EvalReport]]
    baseline: EvalReport
    anchor: EvalReport
    seed: int

    def normalized(self, arm: str, k: int, metric: str) -> float:
        v = self.arms[arm][k].metrics[metric]
        lo = self.baseline.metrics[metric]
        hi = self.anchor.metrics[metric]
        if abs(hi - lo) < 1e-9:
            raise DataError(f"degenerate normalization span for {metric}")
        return (v - lo) / (hi - lo)

    def normalized_mean(self, arm: str, k: int,
                        metrics: tuple[str, ...] = CORE_METRICS) -> float:
        return float(np.mean([self.normalized(arm, k, m) for m in metrics]))

    def normalized_median(self, arm: str, k: int,
                          metrics: tuple[str, ...] = CORE_METRICS) -> float:
        return float(np.median([self.normalized(arm, k, m) for m in metrics]))

    def valid_norm_metrics(self) -> tuple[str, ...]:
        """Core metrics whose baseline-to-anchor span is non-degenerate."""
        return tuple(m for m in CORE_METRICS
                     if abs(self.anchor.metrics[m] - self.baseline.metrics[m]) >= 1e-9)

    def csv_rows(self) -> list[tuple[str, int, str, float, int]]:
        rows: list[tuple[str, int, str, float, int]] = []
        valid = self.valid_norm_metrics()
        for arm, curve in sorted(self.arms.items()):
            for k, report in sorted(curve.items()):
                for name, value in sorted(report.metrics.items()):
                    rows.append((arm, k, name, value, self.seed))
                for name in valid:
                    rows.append((arm, k, f"norm_{name}",
                                 self.normalized(arm, k, name), self.seed))
                if valid:
                    rows.append((arm, k, "norm_mean",
                                 self.normalized_mean(arm, k, valid), self.seed))
                    rows.append((arm, k, "norm_median",
                                 self.normalized_median(arm, k, valid), self.seed))
        for name, value in sorted(self.baseline.metrics.items()):
            rows.append(("baseline", 0, name, value, self.seed))
        for name, value in sorted(self.anchor.metrics.items()):
            rows.append(("anchor", 0, name, value, self.seed))
        return rows

    def write_csv(self, path: Path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["arm", "k_sessions", "metric_name", "value", "seed"])
            for arm, k, name, value, seed in self.csv_rows():
                writer.writerow([arm, k, name, repr(float(value)), seed])


def worker_count() -> int:
    """Worker cap for independent runs, from MINDALIGN_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("MINDALIGN_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Map fn over items, possibly on worker threads; order is preserved."""
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def scaling_experiment(world: WorldSpec, datasets: dict[str, SubjectDataset],
                       held_out: str, session_grid: tuple[int, ...],
                       with_pretraining: bool, cfg: TrainConfig,
                       mcfg, eval_cfg: EvalConfig,
                       checkpoint: ModelParams | None = None) -> dict[int, EvalReport]:
    """One arm of the data-scaling curve: train at each k, then evaluate."""
    if not session_grid:
        raise ConfigError("session grid is empty")
    if with_pretraining and checkpoint is None:
        raise ConfigError("pretrained arm needs a checkpoint")
    target = datasets[held_out]
    arm = "pretrained" if with_pretraining else "scratch"

    def run_one(k: int) -> EvalReport:
        kcfg = replace(cfg, seed=seeds.derive(cfg.seed, "scaling", arm, k))
        if with_pretraining:
            mp, _ = finetune(_clone(checkpoint), world, target, k, kcfg)
        else:
            mp, _ = train_from_scratch(world, target, k, kcfg, mcfg)
        return evaluate_model(mp, world, target, eval_cfg)

    reports = parallel_map(run_one, list(session_grid))
    return dict(zip(session_grid, reports))


def _clone(mp: ModelParams) -> ModelParams:
    from .tensor import Tensor
    return ModelParams(world_cfg=mp.world_cfg, mcfg=mp.mcfg,
                       subjects=dict(mp.subjects),
                       params={k: Tensor(v.data.copy(),
                                         requires_grad=v.requires_grad)
                               for k, v in mp.params.items()},
                       schedule=mp.schedule, meta=dict(mp.meta))


def run_scaling(world: WorldSpec, datasets: dict[str, SubjectDataset],
                held_out: str, session_grid: tuple[int, ...],
                arms: tuple[str, ...], cfg: TrainConfig, mcfg,
                eval_cfg: EvalConfig) -> ScalingResult:
    """Both scaling arms plus the normalization anchors.

    The anchor is the pretrained model fine-tuned on every available session;
    the baseline scores random images (retrieval anchored at chance).
    """
    for arm in arms:
        if arm not in ("pretrained", "scratch"):
            raise ConfigError(f"unknown scaling arm {arm!r}")
    target = datasets[held_out]
    n_sessions = int(target.session_index.max()) + 1
    # the normalization anchor is the full-data pretrained model, so the
    # pretraining pass runs regardless of which arms were requested
    pre_sets = {sid: ds for sid, ds in datasets.items() if sid != held_out}
    checkpoint, _ = pretrain(world, pre_sets, cfg, mcfg)
    result_arms: dict[str, dict[int, EvalReport]] = {}
    for arm in arms:
        result_arms[arm] = scaling_experiment(
            world, datasets, held_out, session_grid,
            with_pretraining=(arm == "pretrained"), cfg=cfg, mcfg=mcfg,
            eval_cfg=eval_cfg, checkpoint=checkpoint)
    if "pretrained" in result_arms and n_sessions in result_arms["pretrained"]:
        anchor = result_arms["pretrained"][n_sessions]
    else:
        acfg = replace(cfg, seed=seeds.derive(cfg.seed, "scaling", "pretrained",
                                              n_sessions))
        mp, _ = finetune(_clone(checkpoint), world, target, n_sessions, acfg)
        anchor = evaluate_model(mp, world, target, eval_cfg)
    baseline = random_baseline_report(world, target, eval_cfg)
    return ScalingResult(arms=result_arms, baseline=baseline, anchor=anchor,
                         seed=cfg.seed)
