"""The trainable decoding graph.

Per-subject ridge layers map voxels into a shared latent; a residual MLP
backbone lifts the latent to a frozen token-embedding grid; three heads hang
off the backbone tokens: a denoising prior (used for reconstruction), a
contrastive retrieval projector, and a low-level head predicting the
compressed latent plus a teacher embedding. A factorized token-space
converter maps the primary token space into a second one.

Only the ridge layer is subject-conditioned; everything downstream is
shared. Parameters are stored in a flat name->Tensor dict so the optimizer
and the checkpoint format see one namespace.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import seeds
from .errors import ConfigError, DataError
from .flatkv import format_flat, parse_flat
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    l2_normalize,
    layernorm,
    matmul,
    mse_loss,
    mul,
    reshape,
    tensor_slice,
    transpose,
)
from .world import WorldConfig, world_config_from_items, world_config_items

CHECKPOINT_MAGIC = b"ME2C"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    h: int = 256                 # shared-latent width (paper-scale value: 4096)
    n_blocks: int = 4
    t_steps: int = 64
    schedule: str = "cosine"
    d_temb: int = 32
    d_cond: int = 256
    denoiser_hidden: int = 512
    denoiser_blocks: int = 2
    retr_hidden: int = 256
    d_retr: int = 64
    ll_hidden: int = 256
    ll_trunk: int = 256
    ll_seed_hw: int = 2
    ll_seed_channels: int = 32
    teacher_hidden: int = 64
    m_tokens: int = 12
    d_token_b: int = 32
    mlp_ridge: bool = False      # Table-4-style variant: MLP with dropout
    ridge_dropout: float = 0.5

    def validate(self) -> None:
        ints = [self.h, self.n_blocks, self.t_steps, self.d_temb, self.d_cond,
                self.denoiser_hidden, self.denoiser_blocks, self.retr_hidden,
                self.d_retr, self.ll_hidden, self.ll_trunk, self.ll_seed_hw,
                self.ll_seed_channels, self.teacher_hidden, self.m_tokens,
                self.d_token_b]
        if min(ints) < 1:
            raise ConfigError("model dims must be positive")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.schedule!r}")
        if not 0.0 <= self.ridge_dropout < 1.0:
            raise ConfigError("ridge_dropout must be in [0, 1)")


@dataclass
class DiffusionSchedule:
    kind: str
    t_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = self.alpha_bar
        if np.any(ab <= 0.0) or np.any(ab > 1.0) or np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing in (0, 1]")


def make_schedule(kind: str, t_steps: int) -> DiffusionSchedule:
    if t_steps < 1:
        raise ConfigError("t_steps must be >= 1")
    if kind == "cosine":
        s = 0.008
        grid = (np.arange(1, t_steps + 1) / t_steps + s) / (1 + s) * np.pi / 2
        alpha_bar = np.cos(grid) ** 2 / np.cos(s / (1 + s) * np.pi / 2) ** 2
    elif kind == "linear":
        scale = 1000.0 / t_steps
        betas = np.clip(np.linspace(1e-4 * scale, 0.02 * scale, t_steps), 1e-8, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(kind, t_steps, np.clip(alpha_bar, 1e-12, 1.0))


@dataclass
class ModelParams:
    world_cfg: WorldConfig
    mcfg: ModelConfig
    subjects: dict[str, int]           # subject id -> voxel count
    params: dict[str, Tensor]
    schedule: DiffusionSchedule
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def token_dim(self) -> int:
        return self.world_cfg.token_dim

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def shared_parameter_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("ridge.")]


# -- initialization -------------------------------------------------------


def _uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def _init_linear(params: dict[str, Tensor], name: str, out_dim: int, in_dim: int,
                 rng: np.random.Generator) -> None:
    params[f"{name}.W"] = Tensor(_uniform(rng, out_dim, in_dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(out_dim), requires_grad=True)


def _ll_stage_channels(world_cfg: WorldConfig, mcfg: ModelConfig) -> list[int]:
    """Channel plan for the upsampler: halve per doubling, land on vae channels."""
    ratio = world_cfg.vae_hw // mcfg.ll_seed_hw
    if mcfg.ll_seed_hw * ratio != world_cfg.vae_hw or ratio & (ratio - 1):
        raise ConfigError("vae_hw must be ll_seed_hw times a power of two")
    n_stages = int(np.log2(ratio))
    chans = [mcfg.ll_seed_channels]
    for i in range(n_stages):
        chans.append(world_cfg.vae_channels if i == n_stages - 1
                     else max(world_cfg.vae_channels, chans[-1] // 2))
    return chans


def init_model(world_cfg: WorldConfig, mcfg: ModelConfig,
               subjects: dict[str, int], seed: int) -> ModelParams:
    """Fresh seed-controlled parameters for the given subjects."""
    mcfg.validate()
    D = world_cfg.token_dim
    h = mcfg.h
    params: dict[str, Tensor] = {}

    for sid, n_vox in subjects.items():
        _init_subject_ridge(params, sid, n_vox, h, mcfg, seeds.rng(seed, "ridge", sid))

    rng = seeds.rng(seed, "shared")
    for i in range(mcfg.n_blocks):
        params[f"backbone.block{i}.ln_g"] = Tensor(np.ones(h), requires_grad=True)
        params[f"backbone.block{i}.ln_b"] = Tensor(np.zeros(h), requires_grad=True)
        _init_linear(params, f"backbone.block{i}.fc1", h, h, rng)
        _init_linear(params, f"backbone.block{i}.fc2", h, h, rng)
    params["backbone.to_tokens"] = Tensor(_uniform(rng, D, h), requires_grad=True)

    params["prior.temb"] = Tensor(
        _uniform(rng, mcfg.t_steps, mcfg.d_temb), requires_grad=True)
    _init_linear(params, "prior.cond.fc1", mcfg.d_cond, D, rng)
    _init_linear(params, "prior.cond.fc2", mcfg.d_cond, mcfg.d_cond, rng)
    _init_linear(params, "prior.inp", mcfg.denoiser_hidden,
                 D + mcfg.d_temb + mcfg.d_cond, rng)
    for i in range(mcfg.denoiser_blocks):
        _init_linear(params, f"prior.res{i}", mcfg.denoiser_hidden,
                     mcfg.denoiser_hidden, rng)
    _init_linear(params, "prior.out", D, mcfg.denoiser_hidden, rng)

    _init_linear(params, "retrieval.fc1", mcfg.retr_hidden, D, rng)
    _init_linear(params, "retrieval.fc2", mcfg.d_retr, mcfg.retr_hidden, rng)
    # image-side embedding map: frozen, mirroring the locked target space the
    # brain-side projector is contrastively aligned to
    params["retrieval.target.W"] = Tensor(
        rng.normal(size=(mcfg.d_retr, D)) / np.sqrt(D), requires_grad=False)

    _init_linear(params, "lowlevel.trunk.fc1", mcfg.ll_hidden, D, rng)
    _init_linear(params, "lowlevel.trunk.fc2", mcfg.ll_trunk, mcfg.ll_hidden, rng)
    chans = _ll_stage_channels(world_cfg, mcfg)
    _init_linear(params, "lowlevel.seed",
                 mcfg.ll_seed_hw * mcfg.ll_seed_hw * chans[0], mcfg.ll_trunk, rng)
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        _init_linear(params, f"lowlevel.stage{i}", cout, cin, rng)
    _init_linear(params, "lowlevel.teacher.fc1", mcfg.teacher_hidden, mcfg.ll_trunk, rng)
    _init_linear(params, "lowlevel.teacher.fc2", world_cfg.d_teacher,
                 mcfg.teacher_hidden, rng)

    _init_linear(params, "converter.token", mcfg.m_tokens, world_cfg.n_tokens, rng)
    _init_linear(params, "converter.feat", mcfg.d_token_b, world_cfg.d_token, rng)

    return ModelParams(world_cfg=world_cfg, mcfg=mcfg, subjects=dict(subjects),
                       params=params, schedule=make_schedule(mcfg.schedule, mcfg.t_steps))


def _init_subject_ridge(params: dict[str, Tensor], sid: str, n_vox: int, h: int,
                        mcfg: ModelConfig, rng: np.random.Generator) -> None:
    params[f"ridge.{sid}.W"] = Tensor(_uniform(rng, h, n_vox), requires_grad=True)
    params[f"ridge.{sid}.b"] = Tensor(np.zeros(h), requires_grad=True)
    if mcfg.mlp_ridge:
        params[f"ridge.{sid}.W2"] = Tensor(_uniform(rng, h, h), requires_grad=True)
        params[f"ridge.{sid}.b2"] = Tensor(np.zeros(h), requires_grad=True)


def add_subject(mp: ModelParams, sid: str, n_vox: int, seed: int) -> None:
    """Initialize a fresh ridge entry for a new subject."""
    if sid in mp.subjects:
        raise DataError(f"subject {sid} already present")
    _init_subject_ridge(mp.params, sid, n_vox, mp.mcfg.h, mp.mcfg,
                        seeds.rng(seed, "ridge", sid))
    mp.subjects[sid] = n_vox


def drop_subject(mp: ModelParams, sid: str) -> None:
    for key in [k for k in mp.params if k.startswith(f"ridge.{sid}.")]:
        del mp.params[key]
    mp.subjects.pop(sid, None)


def expected_parameter_count(world_cfg: WorldConfig, mcfg: ModelConfig,
                             subjects: dict[str, int]) -> int:
    """Analytic parameter count for a config; must equal the built model's."""
    D, h = world_cfg.token_dim, mcfg.h
    n = 0
    for n_vox in subjects.values():
        n += h * n_vox + h
        if mcfg.mlp_ridge:
            n += h * h + h
    n += mcfg.n_blocks * (2 * h + 2 * (h * h + h))
    n += D * h
    n += mcfg.t_steps * mcfg.d_temb
    n += mcfg.d_cond * D + mcfg.d_cond + mcfg.d_cond * mcfg.d_cond + mcfg.d_cond
    din = D + mcfg.d_temb + mcfg.d_cond
    n += mcfg.denoiser_hidden * din + mcfg.denoiser_hidden
    n += mcfg.denoiser_blocks * (mcfg.denoiser_hidden ** 2 + mcfg.denoiser_hidden)
    n += D * mcfg.denoiser_hidden + D
    n += mcfg.retr_hidden * D + mcfg.retr_hidden + mcfg.d_retr * mcfg.retr_hidden + mcfg.d_retr
    n += mcfg.d_retr * D  # frozen image-side embedding map
    n += mcfg.ll_hidden * D + mcfg.ll_hidden + mcfg.ll_trunk * mcfg.ll_hidden + mcfg.ll_trunk
    chans = _ll_stage_channels(world_cfg, mcfg)
    seed_out = mcfg.ll_seed_hw * mcfg.ll_seed_hw * chans[0]
    n += seed_out * mcfg.ll_trunk + seed_out
    for cin, cout in zip(chans[:-1], chans[1:]):
        n += cout * cin + cout
    n += mcfg.teacher_hidden * mcfg.ll_trunk + mcfg.teacher_hidden
    n += world_cfg.d_teacher * mcfg.teacher_hidden + world_cfg.d_teacher
    n += mcfg.m_tokens * world_cfg.n_tokens + mcfg.m_tokens
    n += mcfg.d_token_b * world_cfg.d_token + mcfg.d_token_b
    return n


# -- forward passes -------------------------------------------------------


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W^T + b with W stored [out, in]."""
    return add(matmul(x, transpose(W)), b)


def ridge_forward(mp: ModelParams, subject_id: str, voxels,
                  dropout_mask: np.ndarray | None = None) -> Tensor:
    """Per-subject linear map into the shared latent. [B, V] -> [B, h]."""
    if subject_id not in mp.subjects:
        raise DataError(f"unknown subject {subject_id!r}")
    x = _lift(voxels)
    if x.ndim != 2 or x.shape[1] != mp.subjects[subject_id]:
        raise ShapeError(f"voxels shape {x.shape} does not match subject "
                         f"{subject_id} ({mp.subjects[subject_id]} voxels)")
    p = mp.params
    out = linear(x, p[f"ridge.{subject_id}.W"], p[f"ridge.{subject_id}.b"])
    if mp.mcfg.mlp_ridge:
        out = gelu(out)
        if dropout_mask is not None:
            out = mul(out, Tensor(dropout_mask))
        out = linear(out, p[f"ridge.{subject_id}.W2"], p[f"ridge.{subject_id}.b2"])
    return out


def backbone_forward(mp: ModelParams, latent) -> Tensor:
    """Residual MLP blocks then the linear lift to the token grid.

    [B, h] -> [B, n_tokens, d_token].
    """
    x = _lift(latent)
    p = mp.params
    for i in range(mp.mcfg.n_blocks):
        name = f"backbone.block{i}"
        hidden = layernorm(x, p[f"{name}.ln_g"], p[f"{name}.ln_b"])
        hidden = linear(gelu(linear(hidden, p[f"{name}.fc1.W"], p[f"{name}.fc1.b"])),
                        p[f"{name}.fc2.W"], p[f"{name}.fc2.b"])
        x = add(x, hidden)
    tokens = matmul(x, transpose(p["backbone.to_tokens"]))
    return reshape(tokens, (x.shape[0], mp.world_cfg.n_tokens, mp.world_cfg.d_token))


def _flat_tokens(mp: ModelParams, tokens) -> Tensor:
    t = _lift(tokens)
    if t.ndim == 3:
        t = reshape(t, (t.shape[0], mp.token_dim))
    if t.ndim != 2 or t.shape[1] != mp.token_dim:
        raise ShapeError(f"tokens shape {t.shape} incompatible with token dim "
                         f"{mp.token_dim}")
    return t


def _cond_embed(mp: ModelParams, cond_flat: Tensor) -> Tensor:
    p = mp.params
    c = gelu(linear(cond_flat, p["prior.cond.fc1.W"], p["prior.cond.fc1.b"]))
    return linear(c, p["prior.cond.fc2.W"], p["prior.cond.fc2.b"])


def _denoise_core(mp: ModelParams, x_t: Tensor, t: np.ndarray, cemb: Tensor) -> Tensor:
    p = mp.params
    temb = tensor_slice(p["prior.temb"], np.asarray(t, dtype=np.int64))
    h = gelu(linear(concat([x_t, temb, cemb], axis=1),
                    p["prior.inp.W"], p["prior.inp.b"]))
    for i in range(mp.mcfg.denoiser_blocks):
        h = add(h, gelu(linear(h, p[f"prior.res{i}.W"], p[f"prior.res{i}.b"])))
    return linear(h, p["prior.out.W"], p["prior.out.b"])


def denoise(mp: ModelParams, x_t, t, cond_tokens) -> Tensor:
    """Predict the clean token embedding from (noised tokens, step, conditioning)."""
    return _denoise_core(mp, _flat_tokens(mp, x_t), t,
                         _cond_embed(mp, _flat_tokens(mp, cond_tokens)))


def prior_train_step(mp: ModelParams, backbone_tokens, target_tokens, t,
                     noise_seed: int) -> Tensor:
    """Denoising loss: noise the target to level t, predict it back, MSE."""
    sched = mp.schedule
    target = _flat_tokens(mp, target_tokens)
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.ndim == 1 and t_arr.shape[0] == 1:
        t_arr = np.full(target.shape[0], t_arr[0], dtype=np.int64)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.t_steps):
        raise DataError(f"t out of range [0, {sched.t_steps})")
    eps = seeds.rng(noise_seed, "prior-noise").normal(size=target.shape)
    ab = sched.alpha_bar[t_arr][:, None]
    x_t = Tensor(np.sqrt(ab) * target.data + np.sqrt(1.0 - ab) * eps)
    pred = _denoise_core(mp, x_t, t_arr, _cond_embed(mp, _flat_tokens(mp, backbone_tokens)))
    return mse_loss(pred, target.detach())


def prior_sample(mp: ModelParams, backbone_tokens, seed: int) -> np.ndarray:
    """Ancestral sampling from pure noise, deterministic given seed.

    Each step the denoiser predicts the clean embedding and the standard
    posterior for that prediction produces the next (less noisy) state. With
    a single step this degenerates to one denoiser call on pure noise.
    """
    sched = mp.schedule
    cond = _flat_tokens(mp, backbone_tokens)
    cemb = Tensor(_cond_embed(mp, cond).data)
    n = cond.shape[0]
    rng = seeds.rng(seed, "prior-sample")
    x = rng.normal(size=(n, mp.token_dim))
    ab = sched.alpha_bar
    for t in range(sched.t_steps - 1, 0, -1):
        t_arr = np.full(n, t, dtype=np.int64)
        x0 = _denoise_core(mp, Tensor(x), t_arr, cemb).data
        ab_t, ab_prev = ab[t], ab[t - 1]
        alpha_t = ab_t / ab_prev
        beta_t = 1.0 - alpha_t
        mean = (np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)) * x0 \
            + (np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
        x = mean + np.sqrt(max(var, 0.0)) * rng.normal(size=x.shape)
    x0 = _denoise_core(mp, Tensor(x), np.zeros(n, dtype=np.int64), cemb).data
    return x0.reshape(n, mp.world_cfg.n_tokens, mp.world_cfg.d_token)


def is_frozen_parameter(name: str) -> bool:
    """Frozen parameters persist in checkpoints but never receive updates."""
    return name.startswith("retrieval.target.")


def target_embed(mp: ModelParams, tokens) -> np.ndarray:
    """Frozen unit-norm image-side embeddings for contrastive alignment."""
    flat = _flat_tokens(mp, tokens).data
    raw = flat @ mp.params["retrieval.target.W"].data.T
    return raw / np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)


def retrieval_project(mp: ModelParams, tokens, return_degenerate: bool = False):
    """Two-layer projector then exact L2 row normalization. [B, ...] -> [B, d_retr].

    Rows whose projector output has vanishing norm are replaced by a fixed
    unit fallback (first basis vector) and flagged.
    """
    p = mp.params
    flat = _flat_tokens(mp, tokens)
    raw = linear(gelu(linear(flat, p["retrieval.fc1.W"], p["retrieval.fc1.b"])),
                 p["retrieval.fc2.W"], p["retrieval.fc2.b"])
    norms = np.linalg.norm(raw.data, axis=1)
    degenerate = norms < 1e-12
    emb = l2_normalize(raw, axis=-1, eps=1e-12)
    if degenerate.any():
        keep = Tensor((~degenerate).astype(np.float64)[:, None])
        fallback = np.zeros_like(raw.data)
        fallback[degenerate, 0] = 1.0
        emb = add(mul(emb, keep), Tensor(fallback))
    if return_degenerate:
        return emb, degenerate
    return emb


def _upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of the two spatial axes of [B, h, w, c]."""
    b, h, w, c = x.shape
    expanded = mul(reshape(x, (b, h, 1, w, 1, c)),
                   Tensor(np.ones((1, 1, 2, 1, 2, 1))))
    return reshape(expanded, (b, 2 * h, 2 * w, c))


def lowlevel_forward(mp: ModelParams, tokens) -> tuple[Tensor, Tensor]:
    """Low-level head: compressed-latent grid prediction plus teacher embedding."""
    p = mp.params
    wcfg, mcfg = mp.world_cfg, mp.mcfg
    flat = _flat_tokens(mp, tokens)
    trunk = linear(gelu(linear(flat, p["lowlevel.trunk.fc1.W"], p["lowlevel.trunk.fc1.b"])),
                   p["lowlevel.trunk.fc2.W"], p["lowlevel.trunk.fc2.b"])
    chans = _ll_stage_channels(wcfg, mcfg)
    x = reshape(linear(trunk, p["lowlevel.seed.W"], p["lowlevel.seed.b"]),
                (flat.shape[0], mcfg.ll_seed_hw, mcfg.ll_seed_hw, chans[0]))
    n_stages = len(chans) - 1
    for i in range(n_stages):
        x = _upsample2x(x)
        b, hh, ww, cin = x.shape
        x = reshape(x, (b * hh * ww, cin))
        x = linear(x, p[f"lowlevel.stage{i}.W"], p[f"lowlevel.stage{i}.b"])
        x = reshape(x, (b, hh, ww, chans[i + 1]))
        if i < n_stages - 1:
            x = gelu(x)
    teacher = linear(
        gelu(linear(trunk, p["lowlevel.teacher.fc1.W"], p["lowlevel.teacher.fc1.b"])),
        p["lowlevel.teacher.fc2.W"], p["lowlevel.teacher.fc2.b"])
    return x, teacher


def converter_forward(mp: ModelParams, tokens_a) -> Tensor:
    """Factorized map between token spaces: token-axis linear then feature-axis.

    [B, n_tokens, d_token] -> [B, m_tokens, d_token_b].
    """
    p = mp.params
    t = _lift(tokens_a)
    if t.ndim == 2:
        t = reshape(t, (1,) + t.shape)
    b, n, d = t.shape
    if (n, d) != (mp.world_cfg.n_tokens, mp.world_cfg.d_token):
        raise ShapeError(f"tokens shape {(n, d)} != "
                         f"{(mp.world_cfg.n_tokens, mp.world_cfg.d_token)}")
    x = reshape(transpose(t, (0, 2, 1)), (b * d, n))
    x = linear(x, p["converter.token.W"], p["converter.token.b"])
    x = transpose(reshape(x, (b, d, mp.mcfg.m_tokens)), (0, 2, 1))
    x = reshape(x, (b * mp.mcfg.m_tokens, d))
    x = linear(x, p["converter.feat.W"], p["converter.feat.b"])
    return reshape(x, (b, mp.mcfg.m_tokens, mp.mcfg.d_token_b))


# -- checkpoint format ----------------------------------------------------


def _meta_items(mp: ModelParams) -> dict[str, object]:
    items: dict[str, object] = {}
    items.update(world_config_items(mp.world_cfg, seed=int(mp.meta.get("world_seed", 0))))
    for f in fields(ModelConfig):
        items[f"model.{f.name}"] = getattr(mp.mcfg, f.name)
    items["subjects"] = ",".join(mp.subjects)
    for sid, n_vox in mp.subjects.items():
        items[f"subject.{sid}.n_voxels"] = n_vox
    for k, v in mp.meta.items():
        if k != "world_seed":  # already carried as world.seed
            items[f"meta.{k}"] = v
    return items


def save_checkpoint(mp: ModelParams, path: Path) -> None:
    """Binary checkpoint: magic, version, config echo, named f32 blobs."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    meta = format_flat(_meta_items(mp)).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    names = sorted(mp.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = mp.params[name].data
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.asarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path) -> ModelParams:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<B", buf.read(1))[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    meta_len = struct.unpack("<I", buf.read(4))[0]
    items = parse_flat(buf.read(meta_len).decode("utf-8"))
    world_cfg, world_seed = world_config_from_items(items)
    mkwargs = {}
    for f in fields(ModelConfig):
        rawv = items[f"model.{f.name}"]
        if f.type == "bool":
            mkwargs[f.name] = rawv == "True" or rawv == "true"
        elif f.type == "float":
            mkwargs[f.name] = float(rawv)
        elif f.type == "str":
            mkwargs[f.name] = rawv
        else:
            mkwargs[f.name] = int(rawv)
    mcfg = ModelConfig(**mkwargs)
    subjects = {}
    if items.get("subjects"):
        for sid in items["subjects"].split(","):
            subjects[sid] = int(items[f"subject.{sid}.n_voxels"])
    meta = {k[len("meta."):]: v for k, v in items.items() if k.startswith("meta.")}
    meta["world_seed"] = str(world_seed)
    n_blobs = struct.unpack("<I", buf.read(4))[0]
    params: dict[str, Tensor] = {}
    for _ in range(n_blobs):
        name_len = struct.unpack("<H", buf.read(2))[0]
        name = buf.read(name_len).decode("utf-8")
        ndim = struct.unpack("<B", buf.read(1))[0]
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.astype(np.float64),
                              requires_grad=not is_frozen_parameter(name))
    return ModelParams(world_cfg=world_cfg, mcfg=mcfg, subjects=subjects,
                       params=params, schedule=make_schedule(mcfg.schedule, mcfg.t_steps),
                       meta=meta)
