"""Synthetic ground-truth world: stimuli, frozen encoders, simulated brains.

The world replaces external data and frozen feature extractors with seeded
linear maps whose inverses are known analytically:

* a frozen token encoder (injective on pixel space, so encoded stimuli can
  be decoded exactly via the pseudo-inverse),
* a teacher embedding map and a low-level latent map,
* one linear forward model per simulated subject (voxels = A @ pixels plus
  gaussian noise), with a named region partition over each subject's voxels.

Every generator is a pure function of (config, seed); stimuli are smooth
random fields so pixel-level image metrics stay informative.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import seeds
from .errors import ConfigError, DataError
from .flatkv import format_flat, parse_flat

STD_FLOOR = 1e-6
REGION_NAMES = ("V1", "V2", "V3", "V4", "higher")
# fraction of each subject's voxels per named region, in REGION_NAMES order
_REGION_FRACTIONS = (0.15, 0.15, 0.15, 0.15, 0.40)


@dataclass(frozen=True)
class WorldConfig:
    image_hw: int = 16
    channels: int = 3
    n_tokens: int = 16
    d_token: int = 64
    vae_hw: int = 8
    vae_channels: int = 4
    d_teacher: int = 32
    n_subjects: int = 8
    voxels_min: int = 120
    voxels_max: int = 200
    n_sessions: int = 8
    trials_per_session: int = 40
    n_shared: int = 50
    noise_sigma: float = 0.25
    smooth_sigma: float = 2.0

    @property
    def pixel_dim(self) -> int:
        return self.image_hw * self.image_hw * self.channels

    @property
    def token_dim(self) -> int:
        return self.n_tokens * self.d_token

    @property
    def vae_dim(self) -> int:
        return self.vae_hw * self.vae_hw * self.vae_channels

    @property
    def n_images(self) -> int:
        return self.n_shared + self.n_subjects * self.n_sessions * self.trials_per_session

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"world.{f.name} must be non-negative, got {v}")
        if min(self.image_hw, self.channels, self.n_tokens, self.d_token,
               self.n_subjects, self.n_sessions, self.trials_per_session) < 1:
            raise ConfigError("world dims must be positive")
        if self.token_dim < self.pixel_dim:
            raise ConfigError(
                f"impossible rank condition: token dim {self.token_dim} < "
                f"pixel dim {self.pixel_dim}; token encoder cannot be injective")
        if self.voxels_min > self.voxels_max:
            raise ConfigError("voxels_min exceeds voxels_max")


@dataclass
class SubjectForwardModel:
    subject_id: str
    matrix: np.ndarray  # [n_voxels, pixel_dim], unit-norm rows
    noise_sigma: float

    @property
    def n_voxels(self) -> int:
        return self.matrix.shape[0]


@dataclass
class WorldSpec:
    config: WorldConfig
    seed: int
    encoder: np.ndarray        # [token_dim, pixel_dim]
    decoder: np.ndarray        # pseudo-inverse, [pixel_dim, token_dim]
    teacher: np.ndarray        # [d_teacher, pixel_dim]
    vae_map: np.ndarray        # [vae_dim, pixel_dim]
    vae_pinv: np.ndarray       # [pixel_dim, vae_dim]
    subjects: dict[str, SubjectForwardModel]
    regions: dict[str, dict[str, np.ndarray]]  # subject -> region -> voxel idx
    images: np.ndarray         # [n_images, H, W, C]
    shared_image_ids: np.ndarray
    train_blocks: dict[str, np.ndarray]  # subject -> unique train image ids

    @property
    def subject_ids(self) -> list[str]:
        return list(self.subjects)

    def image(self, image_id: int) -> np.ndarray:
        return self.images[int(image_id)]


@dataclass
class SubjectDataset:
    """Per-subject trials plus split bookkeeping.

    Trials are ordered train-sessions-first (session 0, 1, ...), with the
    shared test trials appended carrying session_index -1; restricting to
    the first k sessions is therefore a prefix operation on the train part.
    """

    subject_id: str
    voxels: np.ndarray         # [n_trials, n_voxels]
    image_ids: np.ndarray      # [n_trials] int64
    session_index: np.ndarray  # [n_trials] int64, -1 for shared test
    is_shared: np.ndarray      # [n_trials] bool
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    normalized: bool = False

    @property
    def n_trials(self) -> int:
        return self.voxels.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[1]

    @property
    def train_mask(self) -> np.ndarray:
        return ~self.is_shared

    def train_voxels(self) -> np.ndarray:
        return self.voxels[self.train_mask]

    def shared_voxels(self) -> np.ndarray:
        return self.voxels[self.is_shared]

    def restrict_sessions(self, k: int) -> "SubjectDataset":
        """First k sessions of training trials; shared test kept whole."""
        n_sessions = int(self.session_index.max()) + 1
        if k < 1 or k > n_sessions:
            raise DataError(f"k={k} outside available sessions [1, {n_sessions}]")
        keep = self.is_shared | (self.session_index < k)
        return SubjectDataset(
            subject_id=self.subject_id,
            voxels=self.voxels[keep].copy(),
            image_ids=self.image_ids[keep].copy(),
            session_index=self.session_index[keep].copy(),
            is_shared=self.is_shared[keep].copy(),
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            normalized=self.normalized,
        )


# -- generation ----------------------------------------------------------


def _smooth_images(n: int, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Low-pass-filtered gaussian fields rescaled into [0, 1]."""
    raw = rng.normal(size=(n, cfg.image_hw, cfg.image_hw, cfg.channels))
    smooth = gaussian_filter(raw, sigma=(0, cfg.smooth_sigma, cfg.smooth_sigma, 0))
    flat = smooth.reshape(n, -1)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    z = (flat - mu) / np.maximum(sd, STD_FLOOR)
    imgs = np.clip(0.5 + 0.22 * z, 0.0, 1.0).reshape(smooth.shape)
    return imgs


def generate_world(config: WorldConfig, seed: int) -> WorldSpec:
    """Build the full synthetic world deterministically from (config, seed)."""
    config.validate()
    px = config.pixel_dim

    enc_rng = seeds.rng(seed, "encoder")
    encoder = enc_rng.normal(size=(config.token_dim, px)) / np.sqrt(px)
    attempts = 0
    while np.linalg.matrix_rank(encoder) < px:
        attempts += 1
        if attempts > 8:
            raise ConfigError("impossible rank condition: encoder stays rank-deficient")
        encoder = enc_rng.normal(size=(config.token_dim, px)) / np.sqrt(px)
    decoder = np.linalg.pinv(encoder)

    teacher = seeds.rng(seed, "teacher").normal(size=(config.d_teacher, px)) / np.sqrt(px)
    vae_map = seeds.rng(seed, "vae").normal(size=(config.vae_dim, px)) / np.sqrt(px)
    vae_pinv = np.linalg.pinv(vae_map)

    subjects: dict[str, SubjectForwardModel] = {}
    regions: dict[str, dict[str, np.ndarray]] = {}
    candidates = np.arange(config.voxels_min, config.voxels_max + 1)
    if candidates.size < config.n_subjects:
        raise ConfigError("voxel range too narrow for distinct per-subject counts")
    size_rng = seeds.rng(seed, "voxel-counts")
    counts = size_rng.choice(candidates, size=config.n_subjects, replace=False)
    for i in range(config.n_subjects):
        sid = f"s{i}"
        n_vox = int(counts[i])
        A = seeds.rng(seed, "forward", sid).normal(size=(n_vox, px))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        subjects[sid] = SubjectForwardModel(sid, A, config.noise_sigma)
        regions[sid] = _partition_regions(n_vox)

    images = _smooth_images(config.n_images, config, seeds.rng(seed, "images"))

    shared_ids = np.arange(config.n_shared, dtype=np.int64)
    block = config.n_sessions * config.trials_per_session
    train_blocks = {
        f"s{i}": np.arange(config.n_shared + i * block,
                           config.n_shared + (i + 1) * block, dtype=np.int64)
        for i in range(config.n_subjects)
    }
    return WorldSpec(config=config, seed=seed, encoder=encoder, decoder=decoder,
                     teacher=teacher, vae_map=vae_map, vae_pinv=vae_pinv,
                     subjects=subjects, regions=regions, images=images,
                     shared_image_ids=shared_ids, train_blocks=train_blocks)


def _partition_regions(n_voxels: int) -> dict[str, np.ndarray]:
    """Disjoint contiguous cover of voxel indices by named regions."""
    bounds = np.cumsum([0] + [f * n_voxels for f in _REGION_FRACTIONS])
    bounds = np.round(bounds).astype(int)
    bounds[-1] = n_voxels
    return {name: np.arange(lo, hi)
            for name, lo, hi in zip(REGION_NAMES, bounds[:-1], bounds[1:])}


def simulate_response(world: WorldSpec, subject_id: str, image: np.ndarray,
                      seed: int) -> np.ndarray:
    """Single-trial voxel vector: A @ pixels + sigma * gaussian(seed)."""
    fm = _subject(world, subject_id)
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    if flat.shape[0] != world.config.pixel_dim:
        raise DataError(f"image has {flat.shape[0]} values, world expects "
                        f"{world.config.pixel_dim}")
    clean = fm.matrix @ flat
    if fm.noise_sigma == 0.0:
        return clean
    noise = seeds.rng(seed, "response-noise").normal(size=fm.n_voxels)
    return clean + fm.noise_sigma * noise


def _subject(world: WorldSpec, subject_id: str) -> SubjectForwardModel:
    try:
        return world.subjects[subject_id]
    except KeyError:
        raise DataError(f"unknown subject {subject_id!r}") from None


def generate_dataset(world: WorldSpec, subject_id: str, n_sessions: int | None = None,
                     trials_per_session: int | None = None, seed: int = 0) -> SubjectDataset:
    """Simulate one subject's trials: unique train images plus the shared test set."""
    cfg = world.config
    fm = _subject(world, subject_id)
    n_sessions = cfg.n_sessions if n_sessions is None else n_sessions
    trials_per_session = (cfg.trials_per_session if trials_per_session is None
                          else trials_per_session)
    if n_sessions < 1:
        raise DataError("n_sessions must be >= 1")
    n_train = n_sessions * trials_per_session
    block = world.train_blocks[subject_id]
    if n_train > block.shape[0]:
        raise DataError(f"requested {n_train} unique train images; world pool "
                        f"allocates {block.shape[0]} to {subject_id}")
    train_ids = block[:n_train]
    image_ids = np.concatenate([train_ids, world.shared_image_ids])
    session_index = np.concatenate([
        np.repeat(np.arange(n_sessions, dtype=np.int64), trials_per_session),
        np.full(cfg.n_shared, -1, dtype=np.int64),
    ])
    is_shared = np.concatenate([
        np.zeros(n_train, dtype=bool), np.ones(cfg.n_shared, dtype=bool)])

    pixels = world.images[image_ids].reshape(len(image_ids), -1)
    clean = pixels @ fm.matrix.T
    noise = seeds.rng(seed, "dataset-noise", subject_id).normal(size=clean.shape)
    voxels = clean + fm.noise_sigma * noise
    return SubjectDataset(subject_id=subject_id, voxels=voxels, image_ids=image_ids,
                          session_index=session_index, is_shared=is_shared)


def normalize(dataset: SubjectDataset) -> SubjectDataset:
    """Voxel-wise z-scoring with statistics from the training split only.

    Standard deviations are floored at STD_FLOOR so a degenerate constant
    voxel cannot produce infinities. Both splits are transformed.
    """
    train = dataset.train_voxels()
    if train.shape[0] == 0:
        raise DataError("cannot normalize: training split is empty")
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), STD_FLOOR)
    return SubjectDataset(
        subject_id=dataset.subject_id,
        voxels=(dataset.voxels - mean) / std,
        image_ids=dataset.image_ids.copy(),
        session_index=dataset.session_index.copy(),
        is_shared=dataset.is_shared.copy(),
        norm_mean=mean,
        norm_std=std,
        normalized=True,
    )


# -- frozen encoders -----------------------------------------------------


def encode_image(world: WorldSpec, image: np.ndarray) -> np.ndarray:
    """Token-grid embedding of one image: reshape(E @ pixels)."""
    flat = _check_pixels(world, image)
    return (world.encoder @ flat).reshape(world.config.n_tokens, world.config.d_token)


def decode_tokens(world: WorldSpec, tokens: np.ndarray) -> np.ndarray:
    """Least-squares pixel pre-image of a token embedding."""
    cfg = world.config
    flat = np.asarray(tokens, dtype=np.float64).reshape(-1)
    if flat.shape[0] != cfg.token_dim:
        raise DataError(f"tokens have {flat.shape[0]} values, expected {cfg.token_dim}")
    return (world.decoder @ flat).reshape(cfg.image_hw, cfg.image_hw, cfg.channels)


def encode_teacher(world: WorldSpec, image: np.ndarray) -> np.ndarray:
    return world.teacher @ _check_pixels(world, image)


def encode_vae(world: WorldSpec, image: np.ndarray) -> np.ndarray:
    cfg = world.config
    return (world.vae_map @ _check_pixels(world, image)).reshape(
        cfg.vae_hw, cfg.vae_hw, cfg.vae_channels)


def decode_vae(world: WorldSpec, latent: np.ndarray) -> np.ndarray:
    """Least-squares pixel pre-image of a low-level latent."""
    cfg = world.config
    flat = np.asarray(latent, dtype=np.float64).reshape(-1)
    if flat.shape[0] != cfg.vae_dim:
        raise DataError(f"latent has {flat.shape[0]} values, expected {cfg.vae_dim}")
    return (world.vae_pinv @ flat).reshape(cfg.image_hw, cfg.image_hw, cfg.channels)


def _check_pixels(world: WorldSpec, image: np.ndarray) -> np.ndarray:
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    if flat.shape[0] != world.config.pixel_dim:
        raise DataError(f"image has {flat.shape[0]} values, expected "
                        f"{world.config.pixel_dim}")
    return flat


# batched target helpers (flattened rows), used by training and evaluation

def token_targets(world: WorldSpec, images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1) @ world.encoder.T


def teacher_targets(world: WorldSpec, images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1) @ world.teacher.T


def vae_targets(world: WorldSpec, images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1) @ world.vae_map.T


@dataclass
class SecondaryEncoder:
    """A second frozen token space, factorized over token and feature axes.

    Related to the primary encoder the way two patch-token embedding spaces
    relate: a token-axis recombination and a feature-axis map. This makes
    the space reachable by the factorized converter it exists to exercise.
    """

    token_map: np.ndarray    # [m_tokens, n_tokens]
    feature_map: np.ndarray  # [d_out, d_token]

    def encode(self, world: WorldSpec, image: np.ndarray) -> np.ndarray:
        return self.token_map @ encode_image(world, image) @ self.feature_map.T

    def encode_batch(self, world: WorldSpec, images: np.ndarray) -> np.ndarray:
        toks = token_targets(world, images).reshape(
            images.shape[0], world.config.n_tokens, world.config.d_token)
        return np.einsum("mn,bnd,ed->bme", self.token_map, toks, self.feature_map)


def secondary_token_encoder(world: WorldSpec, m_tokens: int, d_out: int,
                            seed: int) -> SecondaryEncoder:
    r = seeds.rng(seed, "secondary-encoder")
    tm = r.normal(size=(m_tokens, world.config.n_tokens)) / np.sqrt(world.config.n_tokens)
    fm = r.normal(size=(d_out, world.config.d_token)) / np.sqrt(world.config.d_token)
    return SecondaryEncoder(tm, fm)


# -- persistence ---------------------------------------------------------

_WORLD_FORMAT = "mindalign-world-v1"
_DATASET_FORMAT = "mindalign-dataset-v1"


def world_config_items(config: WorldConfig, seed: int) -> dict[str, object]:
    items: dict[str, object] = {f"world.{f.name}": getattr(config, f.name)
                                for f in fields(config)}
    items["world.seed"] = seed
    return items


def world_config_from_items(items: dict[str, str]) -> tuple[WorldConfig, int]:
    kwargs = {}
    for f in fields(WorldConfig):
        key = f"world.{f.name}"
        if key not in items:
            raise ConfigError(f"world manifest missing key {key}")
        raw = items[key]
        caster = float if f.type == "float" else int
        try:
            kwargs[f.name] = caster(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected {f.type}, got {raw!r}") from None
    if "world.seed" not in items:
        raise ConfigError("world manifest missing key world.seed")
    try:
        seed = int(items["world.seed"])
    except ValueError:
        raise ConfigError("world.seed must be an integer") from None
    return WorldConfig(**kwargs), seed


def save_world_manifest(config: WorldConfig, seed: int, path: Path) -> None:
    items = {"format": _WORLD_FORMAT}
    items.update(world_config_items(config, seed))
    path.write_text(format_flat(items), encoding="utf-8")


def load_world_manifest(path: Path) -> WorldSpec:
    items = parse_flat(path.read_text(encoding="utf-8"))
    if items.get("format") != _WORLD_FORMAT:
        raise ConfigError(f"{path}: not a world manifest")
    config, seed = world_config_from_items(items)
    return generate_world(config, seed)


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DataError(f"{path}: has {arr.size} floats, expected {expected}")
    return arr.reshape(shape).astype(np.float64)


_SUBJECT_FIELDS = ("voxels", "image_ids", "session_index", "split",
                   "norm_mean", "norm_std")


def save_dataset_dir(out_dir: Path, world: WorldSpec,
                     datasets: dict[str, SubjectDataset]) -> None:
    """Write the manifest plus one raw little-endian f32 file per field."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = world.config
    items: dict[str, object] = {"format": _DATASET_FORMAT}
    items.update(world_config_items(cfg, world.seed))
    items["subjects"] = ",".join(datasets)
    items["n_sessions"] = cfg.n_sessions
    items["trials_per_session"] = cfg.trials_per_session
    items["n_shared"] = cfg.n_shared
    items["n_images"] = cfg.n_images
    for sid, ds in datasets.items():
        if not ds.normalized:
            raise DataError(f"dataset for {sid} must be normalized before saving")
        items[f"subject.{sid}.n_voxels"] = ds.n_voxels
        items[f"subject.{sid}.n_trials"] = ds.n_trials
        _write_f32(out_dir / f"{sid}_voxels.f32", ds.voxels)
        _write_f32(out_dir / f"{sid}_image_ids.f32", ds.image_ids)
        _write_f32(out_dir / f"{sid}_session_index.f32", ds.session_index)
        _write_f32(out_dir / f"{sid}_split.f32", ds.is_shared)
        _write_f32(out_dir / f"{sid}_norm_mean.f32", ds.norm_mean)
        _write_f32(out_dir / f"{sid}_norm_std.f32", ds.norm_std)
    _write_f32(out_dir / "images.f32", world.images)
    (out_dir / "manifest.txt").write_text(format_flat(items), encoding="utf-8")


def load_dataset_dir(data_dir: Path) -> tuple[WorldSpec, dict[str, SubjectDataset]]:
    """Reload a dataset directory bit-exactly (world regenerated from its seed).

    The stored image pool replaces the regenerated one so that downstream
    targets are computed from exactly the serialized stimuli.
    """
    data_dir = Path(data_dir)
    items = parse_flat((data_dir / "manifest.txt").read_text(encoding="utf-8"))
    if items.get("format") != _DATASET_FORMAT:
        raise ConfigError(f"{data_dir}: not a dataset directory")
    config, seed = world_config_from_items(items)
    world = generate_world(config, seed)
    world.images = _read_f32(data_dir / "images.f32",
                             (config.n_images, config.image_hw, config.image_hw,
                              config.channels))
    datasets: dict[str, SubjectDataset] = {}
    for sid in items["subjects"].split(","):
        n_vox = int(items[f"subject.{sid}.n_voxels"])
        n_tr = int(items[f"subject.{sid}.n_trials"])
        datasets[sid] = SubjectDataset(
            subject_id=sid,
            voxels=_read_f32(data_dir / f"{sid}_voxels.f32", (n_tr, n_vox)),
            image_ids=_read_f32(data_dir / f"{sid}_image_ids.f32", (n_tr,)).astype(np.int64),
            session_index=_read_f32(data_dir / f"{sid}_session_index.f32", (n_tr,)).astype(np.int64),
            is_shared=_read_f32(data_dir / f"{sid}_split.f32", (n_tr,)).astype(bool),
            norm_mean=_read_f32(data_dir / f"{sid}_norm_mean.f32", (n_vox,)),
            norm_std=_read_f32(data_dir / f"{sid}_norm_std.f32", (n_vox,)),
            normalized=True,
        )
    return world, datasets
