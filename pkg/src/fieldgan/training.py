"""Adversarial and reconstruction training loops.

Each GAN step runs a discriminator phase (fakes rendered without a tape) and
a generator phase (one batched differentiable render). All per-step
randomness is drawn from a counter-based generator keyed by (seed, step), so
a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, backward, no_grad, zero_grads
from .data import Dataset, PoseDistribution, sample_pose
from .discriminator import DiscriminatorParams, discriminate
from .errors import ContractError, TrainingError
from .field import FieldConfig, FieldParams, field_eval
from .hypernet import GeneratorConfig, GeneratorParams, generate_modulations, sample_latent
from .render import (RenderConfig, composite, make_camera_rays, pixel_uniforms,
                     render_rays, _depths_from_offsets)

_EPOCH_KEY_BASE = 2**62  # keeps epoch streams disjoint from step streams


@dataclass
class TrainConfig:
    batch_size: int = 8
    d_steps_per_g_step: int = 1
    total_steps: int = 1000
    lr_g: float = 2.5e-3
    lr_d: float = 2.5e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    instance_noise_sigma: float = 0.05  # decays linearly over total_steps
    instance_noise_floor: float = 0.0  # level the decay bottoms out at
    warmup_steps: int = 0  # photometric warm start of the shared field
    logit_drift: float = 1e-3  # weight of the critic's zero-centered logit penalty
    rng_seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    field_cfg: FieldConfig = dc_field(default_factory=FieldConfig)
    gen_cfg: GeneratorConfig = dc_field(default_factory=GeneratorConfig)
    render_cfg: RenderConfig = dc_field(default_factory=RenderConfig)
    pose_dist: PoseDistribution = dc_field(default_factory=PoseDistribution)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_g <= 0.0 or self.lr_d <= 0.0:
            raise ContractError("learning rates must be > 0")
        if self.d_steps_per_g_step < 1:
            raise ContractError("d_steps_per_g_step must be >= 1")
        if self.total_steps < 0:
            raise ContractError("total_steps must be >= 0")


@dataclass
class TrainState:
    cfg: TrainConfig
    step: int
    field_params: FieldParams
    gen_params: GeneratorParams
    disc_params: DiscriminatorParams
    opt_g: AdamState
    opt_d: AdamState
    loss_d_avg: float = 0.0
    loss_g_avg: float = 0.0
    warmup_done: bool = False
    history: list = dc_field(default_factory=list)

    def generator_side(self) -> list[Tensor]:
        """Everything a G phase updates: trunk, heads, and the shared W_l, b_l."""
        return [*self.gen_params.trainables(), *self.field_params.trainables()]

    def discriminator_side(self) -> list[Tensor]:
        return self.disc_params.trainables()


def init_train_state(cfg: TrainConfig) -> TrainState:
    if cfg.render_cfg.width != cfg.render_cfg.height:
        raise ContractError("training renders must be square")
    rng = np.random.Generator(np.random.Philox(key=[cfg.rng_seed & (2**64 - 1), 0]))
    field_params = FieldParams.init(cfg.field_cfg, rng)
    gen_params = GeneratorParams.init(cfg.gen_cfg, cfg.field_cfg, rng)
    disc_params = DiscriminatorParams.init(cfg.render_cfg.width, rng)
    g_side = [*gen_params.trainables(), *field_params.trainables()]
    opt_g = AdamState(g_side, learning_rate=cfg.lr_g,
                      beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    opt_d = AdamState(disc_params.trainables(), learning_rate=cfg.lr_d,
                      beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    return TrainState(cfg=cfg, step=0, field_params=field_params,
                      gen_params=gen_params, disc_params=disc_params,
                      opt_g=opt_g, opt_d=opt_d)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """The step's private random stream; resuming at `step` recreates it."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), step + 1]))


def render_batch(poses, params: FieldParams, mods, cfg: RenderConfig,
                 seeds) -> Tensor:
    """Render one image per (pose, modulation item) as a single stacked graph.

    Returns (B, H, W, 3). mods must be batched with leading dimension len(poses).
    """
    n = cfg.samples_per_ray
    bg = np.asarray(cfg.background, dtype=np.float64)
    pts, depths = [], []
    t_far = None
    for pose, seed in zip(poses, seeds):
        bundle = make_camera_rays(pose, cfg.width, cfg.height)
        p = len(bundle)
        if cfg.sampling_mode == "stratified":
            u = pixel_uniforms(int(seed), p, n)
        else:
            u = np.full((p, n), 0.5)
        d = _depths_from_offsets(bundle.t_near, bundle.t_far, u)
        pts.append((bundle.origins[:, None, :]
                    + d[..., None] * bundle.directions[:, None, :]).reshape(-1, 3))
        depths.append(d)
        t_far = bundle.t_far if t_far is None else t_far
        if bundle.t_far != t_far:
            raise ContractError("render_batch requires a shared far bound")
    b = len(poses)
    p = cfg.width * cfg.height
    rb = field_eval(Tensor(np.stack(pts)), params, mods, params.cfg)
    sigma = ad.reshape(rb.density, (b * p, n))
    color = ad.reshape(rb.color, (b * p, n, 3))
    out = composite(sigma, color, np.concatenate(depths), t_far, bg)
    return ad.reshape(out, (b, cfg.height, cfg.width, 3))


def _noise_sigma(cfg: TrainConfig, step: int) -> float:
    if cfg.total_steps <= 0:
        return 0.0
    decayed = cfg.instance_noise_sigma * (1.0 - step / cfg.total_steps)
    return max(cfg.instance_noise_floor, max(0.0, decayed))


def _to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


def _sample_fake_inputs(state: TrainState, rng: np.random.Generator):
    cfg = state.cfg
    z = sample_latent(rng, cfg.gen_cfg.z_dim, batch=cfg.batch_size)
    poses = [sample_pose(cfg.pose_dist, rng) for _ in range(cfg.batch_size)]
    seeds = rng.integers(0, 2**63, size=cfg.batch_size)
    return z, poses, seeds


def discriminator_loss(state: TrainState, real_in: np.ndarray,
                       fake_in: np.ndarray) -> Tensor:
    """Non-saturating logistic critic loss on prepared (noised) image batches."""
    logit_real = discriminate(Tensor(real_in), state.disc_params)
    logit_fake = discriminate(Tensor(fake_in), state.disc_params)
    return ad.add(ad.tensor_reduce(ad.softplus(ad.neg(logit_real)), "mean"),
                  ad.tensor_reduce(ad.softplus(logit_fake), "mean"))


def _logit_drift_penalty(state: TrainState, real_in, fake_in) -> Tensor:
    logit_real = discriminate(Tensor(real_in), state.disc_params)
    logit_fake = discriminate(Tensor(fake_in), state.disc_params)
    return ad.add(ad.tensor_reduce(ad.mul(logit_real, logit_real), "mean"),
                  ad.tensor_reduce(ad.mul(logit_fake, logit_fake), "mean"))


def d_phase(state: TrainState, real_batch: np.ndarray,
            rng: np.random.Generator) -> float:
    """Render fakes without a tape, add instance noise, update the critic only.

    The optimized objective adds a small zero-centered penalty on the raw
    logits, bounding the critic's confidence in place of the second-order
    gradient penalty this tape does not support. The returned value is the
    plain logistic loss.
    """
    cfg = state.cfg
    sigma_noise = _noise_sigma(cfg, state.step)
    z, poses, seeds = _sample_fake_inputs(state, rng)
    with no_grad():
        mods = generate_modulations(z, state.gen_params)
        fakes = render_batch(poses, state.field_params, mods, cfg.render_cfg, seeds).data
    real_in = _to_nchw(real_batch)
    fake_in = _to_nchw(fakes)
    if sigma_noise > 0.0:
        real_in = real_in + rng.normal(0.0, sigma_noise, size=real_in.shape)
        fake_in = fake_in + rng.normal(0.0, sigma_noise, size=fake_in.shape)
    loss_d = discriminator_loss(state, real_in, fake_in)
    objective = loss_d
    if cfg.logit_drift > 0.0:
        objective = ad.add(loss_d, ad.mul(Tensor(cfg.logit_drift),
                                          _logit_drift_penalty(state, real_in, fake_in)))
    backward(objective)
    adam_step(state.discriminator_side(), state.opt_d)
    zero_grads(state.generator_side())  # D phase must leave G untouched
    return float(loss_d.data)


def generator_loss(state: TrainState, rng: np.random.Generator) -> Tensor:
    """Differentiable render of fresh fakes scored by the (frozen) critic.

    The same decaying instance noise used in the D phase is added here, so
    the critic is probed on the distribution it was trained on.
    """
    cfg = state.cfg
    sigma_noise = _noise_sigma(cfg, state.step)
    z, poses, seeds = _sample_fake_inputs(state, rng)
    mods = generate_modulations(z, state.gen_params)
    imgs = render_batch(poses, state.field_params, mods, cfg.render_cfg, seeds)
    fake_in = ad.transpose(imgs, (0, 3, 1, 2))
    if sigma_noise > 0.0:
        fake_in = ad.add(fake_in, Tensor(rng.normal(0.0, sigma_noise,
                                                    size=fake_in.shape)))
    logits = discriminate(fake_in, state.disc_params)
    return ad.tensor_reduce(ad.softplus(ad.neg(logits)), "mean")


def g_phase(state: TrainState, rng: np.random.Generator) -> float:
    """Update the hypernetwork and shared field weights; discard critic grads."""
    loss_g = generator_loss(state, rng)
    backward(loss_g)
    adam_step(state.generator_side(), state.opt_g)
    zero_grads(state.discriminator_side())
    return float(loss_g.data)


def gan_step(state: TrainState, real_batch: np.ndarray,
             rng: np.random.Generator, update_g: bool = True) -> tuple[float, float]:
    """One adversarial step: D phase then (optionally) G phase.

    real_batch: (batch_size, S, S, 3) in [0, 1]. Returns (loss_d, loss_g);
    loss_g is nan when the G phase is skipped by the step ratio.
    """
    cfg = state.cfg
    if real_batch.shape[0] != cfg.batch_size:
        raise ContractError(
            f"real batch of {real_batch.shape[0]} vs batch_size {cfg.batch_size}")
    loss_d_val = d_phase(state, real_batch, rng)
    loss_g_val = g_phase(state, rng) if update_g else float("nan")
    if not np.isfinite(loss_d_val) or (update_g and not np.isfinite(loss_g_val)):
        raise TrainingError(f"non-finite loss (d={loss_d_val}, g={loss_g_val})",
                            step=state.step)
    state.step += 1
    beta = 0.01
    state.loss_d_avg += beta * (loss_d_val - state.loss_d_avg)
    if update_g:
        state.loss_g_avg += beta * (loss_g_val - state.loss_g_avg)
    return loss_d_val, loss_g_val


def reconstruction_step(state: TrainState, target_views, z_fixed: np.ndarray,
                        rng: np.random.Generator | None = None,
                        rays_per_view: int | None = None) -> float:
    """Photometric step against (pose, image) targets rendered from a fixed z.

    When rays_per_view is set, a random pixel subset per view is rendered;
    the returned mse covers exactly the rendered pixels.
    """
    cfg = state.cfg
    mods = generate_modulations(z_fixed, state.gen_params)
    render_cfg = cfg.render_cfg
    if rng is not None and render_cfg.sampling_mode == "stratified":
        render_cfg = replace(render_cfg, rng_seed=int(rng.integers(0, 2**63)))
    preds, targets = [], []
    for pose, image in target_views:
        bundle = make_camera_rays(pose, render_cfg.width, render_cfg.height)
        flat_target = image.reshape(-1, 3)
        if rays_per_view is not None and rays_per_view < len(bundle):
            if rng is None:
                raise ContractError("ray subsetting needs an rng")
            idx = rng.choice(len(bundle), size=rays_per_view, replace=False)
        else:
            idx = None
        preds.append(render_rays(bundle, state.field_params, mods, render_cfg,
                                 pixel_indices=idx))
        targets.append(flat_target if idx is None else flat_target[idx])
    pred = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
    diff = ad.add(pred, Tensor(-np.concatenate(targets)))
    mse = ad.tensor_reduce(ad.mul(diff, diff), "mean")
    backward(mse)
    adam_step(state.generator_side(), state.opt_g)
    mse_val = float(mse.data)
    if not np.isfinite(mse_val):
        raise TrainingError("non-finite reconstruction mse", step=state.step)
    state.step += 1
    return mse_val


def field_warm_start(state: TrainState) -> None:
    """Photometric warm start: fit the shared field to a canonical gray sphere.

    Fresh fields render fog that an adversary separates instantly, pushing
    the generator into a dead all-background collapse; starting from a
    centered matte sphere keeps both players in the game. Runs once per
    state (tracked through checkpoints); the optimizer is reset afterwards.
    """
    cfg = state.cfg
    from .data import SceneSpec, oracle_render, pose_from_angles

    scene = SceneSpec(size=0.45, albedo=(0.5, 0.5, 0.5),
                      background=cfg.render_cfg.background)
    views = []
    for k in range(8):
        pose = pose_from_angles(k * 2.0 * np.pi / 8.0, 0.25, cfg.pose_dist)
        views.append((pose, oracle_render(scene, pose, cfg.render_cfg.width)))
    z0 = np.zeros(cfg.gen_cfg.z_dim)
    rng = np.random.Generator(np.random.Philox(key=[cfg.rng_seed & (2**64 - 1),
                                                    _EPOCH_KEY_BASE - 2]))
    saved_step = state.step
    for _ in range(cfg.warmup_steps):
        reconstruction_step(state, views, z0, rng=rng, rays_per_view=64)
    state.step = saved_step
    state.opt_g.step_count = 0
    state.opt_g.first_moment = [np.zeros_like(m) for m in state.opt_g.first_moment]
    state.opt_g.second_moment = [np.zeros_like(m) for m in state.opt_g.second_moment]
    state.warmup_done = True


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1),
                                                    _EPOCH_KEY_BASE + epoch]))
    return gen.permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int,
                  perm_cache: dict | None = None) -> np.ndarray:
    """Minibatch indices for a step, shuffled per epoch, derivable from step alone."""
    out = np.empty(batch_size, dtype=np.int64)
    cache = perm_cache if perm_cache is not None else {}
    for j in range(batch_size):
        epoch, pos = divmod(step * batch_size + j, n)
        if epoch not in cache:
            cache[epoch] = _epoch_perm(seed, epoch, n)
            if perm_cache is not None and len(cache) > 4:
                cache.pop(min(k for k in cache if k != epoch), None)
        out[j] = cache[epoch][pos]
    return out


def train_loop(cfg: TrainConfig, dataset: Dataset, callbacks=(),
               state: TrainState | None = None, out_dir: str | None = None) -> TrainState:
    """Run gan_step until cfg.total_steps, logging metrics and checkpoints."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if dataset.image_size != cfg.render_cfg.width:
        raise ContractError(
            f"dataset images are {dataset.image_size}px but renders are "
            f"{cfg.render_cfg.width}px")
    if state is None:
        state = init_train_state(cfg)
    if cfg.warmup_steps > 0 and not state.warmup_done and state.step == 0:
        field_warm_start(state)

    log_fh = None
    ckpt_path = None
    if out_dir is not None:
        import os

        from .checkpoint import save_checkpoint

        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    images = dataset.images()
    perm_cache: dict = {}
    t_start = time.time()
    try:
        while state.step < cfg.total_steps:
            step = state.step
            rng = step_rng(cfg.rng_seed, step)
            idx = batch_indices(cfg.rng_seed, step, cfg.batch_size, len(dataset),
                                perm_cache)
            update_g = (step % cfg.d_steps_per_g_step) == 0
            loss_d, loss_g = gan_step(state, images[idx], rng, update_g=update_g)
            done = state.step
            if cfg.log_every > 0 and (done % cfg.log_every == 0 or done == cfg.total_steps):
                record = {"step": done, "loss_d": loss_d, "loss_g": loss_g,
                          "wallclock_s": round(time.time() - t_start, 3)}
                state.history.append(record)
                if log_fh is not None:
                    import json

                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                for cb in callbacks:
                    cb(state, record)
            if ckpt_path is not None and cfg.checkpoint_every > 0 \
                    and done % cfg.checkpoint_every == 0:
                save_checkpoint(state, ckpt_path)
        if ckpt_path is not None:
            save_checkpoint(state, ckpt_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
