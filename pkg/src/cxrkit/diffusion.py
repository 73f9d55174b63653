"""Pixel-space denoising diffusion for 64x64 images, with a control branch.

A variance-preserving DDPM (linear beta schedule, T=100 by default) drives a
small U-shaped denoiser with self/cross-attention at low resolutions. After
base training the denoiser is frozen and a trainable copy of its encoder is
attached through 1x1 zero-initialized convolutions, so fine-tuning starts
from an exact identity and only the branch moves.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from .aligner import Aligner, TextCondition
from .config import Config
from .corpus import load_image, load_split
from .nn import (Conv2d, GroupNorm, Linear, ParamStore, TransformerBlock,
                 sinusoidal_embedding)
from .optim import Adam
from .rng import Rng
from .tensor import Graph, Tensor, avg_pool2d, concat, forward_backward, upsample2x

COND_LEN = 20


class NoiseSchedule:
    """alpha_t = sqrt(prod(1-beta)), sigma_t = sqrt(1-alpha_t^2); t=0 clean.

    The (beta_start, beta_end) range is stated per reference step (1000-step
    convention). For other step counts the log-signal curve of that reference
    schedule is resampled, so the total amount of diffusion — and hence the
    near-zero correlation between z_T and z_0 — is independent of T: discrete
    betas come from the continuous-time integral of the linear rate, and
    alpha-bar is recovered exactly as their running product.
    """

    def __init__(self, steps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02, reference_steps: int = 1000):
        if steps < 2:
            raise ValueError("schedule needs at least 2 steps")
        self.steps = steps
        s = np.linspace(0.0, 1.0, steps + 1, dtype=np.float64)
        integral = reference_steps * (beta_start * s
                                      + 0.5 * (beta_end - beta_start) * s ** 2)
        log_abar = -integral[1:]
        betas = 1.0 - np.exp(np.diff(-integral))
        abar = np.exp(log_abar)
        assert np.allclose(np.cumprod(1.0 - betas), abar)
        self.alpha = np.concatenate([[1.0], np.sqrt(abar)])
        self.sigma = np.sqrt(1.0 - self.alpha ** 2)
        # signal lost between consecutive steps: sigma_{t|t-1}^2
        step_var = np.zeros(steps + 1)
        step_var[1:] = self.sigma[1:] ** 2 - \
            (self.alpha[1:] / self.alpha[:-1]) ** 2 * self.sigma[:-1] ** 2
        self.step_var = step_var
        post = np.zeros(steps + 1)
        post[2:] = step_var[2:] * self.sigma[1:-1] ** 2 / self.sigma[2:] ** 2
        self.posterior_var = post

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.steps):
            raise ValueError(f"t out of range [0, {self.steps}]")
        return t

    def _coef(self, arr, t, ndim):
        return arr[t].reshape((-1,) + (1,) * (ndim - 1)) if np.ndim(t) else arr[t]

    def q_sample(self, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        t = self._check_t(t)
        if eps.shape != z0.shape:
            raise ValueError("noise shape mismatch")
        a = self._coef(self.alpha, t, z0.ndim)
        s = self._coef(self.sigma, t, z0.ndim)
        return a * z0 + s * eps

    def predict_x0(self, zt: np.ndarray, t, eps_hat: np.ndarray) -> np.ndarray:
        t = self._check_t(t)
        a = self._coef(self.alpha, t, zt.ndim)
        s = self._coef(self.sigma, t, zt.ndim)
        return (zt - s * eps_hat) / a

    def posterior_coefs(self, t: int):
        """mu = c0 * x0_hat + c1 * z_t for one reverse step."""
        t = int(self._check_t(t))
        if t < 1:
            raise ValueError("reverse step needs t >= 1")
        c0 = self.alpha[t - 1] * self.step_var[t] / self.sigma[t] ** 2
        c1 = (self.alpha[t] / self.alpha[t - 1]) * \
            self.sigma[t - 1] ** 2 / self.sigma[t] ** 2
        return c0, c1

    def reverse_step(self, zt: np.ndarray, t: int, eps_hat: np.ndarray,
                     rng: Rng | None) -> np.ndarray:
        c0, c1 = self.posterior_coefs(t)
        mu = c0 * self.predict_x0(zt, t, eps_hat) + c1 * zt
        var = self.posterior_var[t]
        if var > 0:
            if rng is None:
                raise ValueError("rng required when posterior variance > 0")
            mu = mu + np.sqrt(var) * rng.normal(zt.shape)
        return mu


# ---------------------------------------------------------------------------
# denoiser


class ResBlock:
    def __init__(self, store, prefix, cin, cout, tdim, rng):
        self.gn1 = GroupNorm(store, f"{prefix}.gn1", cin)
        self.conv1 = Conv2d(store, f"{prefix}.conv1", cin, cout, 3, rng)
        self.tproj = Linear(store, f"{prefix}.tproj", tdim, cout, rng)
        self.gn2 = GroupNorm(store, f"{prefix}.gn2", cout)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", cout, cout, 3, rng)
        self.skip = Conv2d(store, f"{prefix}.skip", cin, cout, 1, rng) \
            if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.gn1(x).gelu())
        h = h + self.tproj(temb).reshape(temb.shape[0], -1, 1, 1)
        h = self.conv2(self.gn2(h).gelu())
        return h + (self.skip(x) if self.skip else x)


class _SpatialAttn:
    """Self + cross attention over flattened feature-map tokens."""

    def __init__(self, store, prefix, channels, heads, cross_dim, rng):
        self.block = TransformerBlock(store, prefix, channels, heads, rng,
                                      cross_dim=cross_dim)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = x.reshape(B, C, H * W).swapaxes(1, 2)
        tokens = self.block(tokens, context=context)
        return tokens.swapaxes(1, 2).reshape(B, C, H, W)


class _Encoder:
    """Stem at full resolution, then four pool+ResBlock down stages.

    For 64x64 input the skips sit at 32/16/8/4; each down block pools first
    so the expensive 3x3 convolutions never run at full resolution.
    """

    def __init__(self, store, prefix, c, tdim, cross_dim, heads, rng):
        self.stem = Conv2d(store, f"{prefix}.stem", 1, c, 3, rng)
        self.down = [
            ResBlock(store, f"{prefix}.down1", c, c, tdim, rng),
            ResBlock(store, f"{prefix}.down2", c, 2 * c, tdim, rng),
            ResBlock(store, f"{prefix}.down3", 2 * c, 3 * c, tdim, rng),
            ResBlock(store, f"{prefix}.down4", 3 * c, 4 * c, tdim, rng),
        ]
        self.attn8 = _SpatialAttn(store, f"{prefix}.attn8", 3 * c, heads,
                                  cross_dim, rng)

    def __call__(self, x: Tensor, temb: Tensor, context: Tensor):
        stem = self.stem(x)
        h = stem
        skips = []
        for i, blk in enumerate(self.down):
            h = blk(avg_pool2d(h, 2), temb)
            if i == 2:
                h = self.attn8(h, context)
            skips.append(h)
        return stem, skips, h


class Denoiser:
    """U-shaped eps-predictor conditioned on time and text tokens."""

    def __init__(self, config: Config, store: ParamStore | None = None,
                 prefix: str = "sd.base"):
        self.config = config
        c = config.sd_channels
        self.tdim = 4 * c
        heads = 4
        cross = config.embed_dim
        rng = Rng(config.seed, f"{prefix}.init")
        s = store if store is not None else ParamStore()
        self.store = s
        self.tfc1 = Linear(s, f"{prefix}.tfc1", 2 * c, self.tdim, rng)
        self.tfc2 = Linear(s, f"{prefix}.tfc2", self.tdim, self.tdim, rng)
        self.encoder = _Encoder(s, f"{prefix}.enc", c, self.tdim, cross, heads, rng)
        self.mid1 = ResBlock(s, f"{prefix}.mid1", 4 * c, 4 * c, self.tdim, rng)
        self.mid_attn = _SpatialAttn(s, f"{prefix}.mida", 4 * c, heads, cross, rng)
        self.mid2 = ResBlock(s, f"{prefix}.mid2", 4 * c, 4 * c, self.tdim, rng)
        self.up = [
            ResBlock(s, f"{prefix}.up4", 8 * c, 3 * c, self.tdim, rng),
            ResBlock(s, f"{prefix}.up3", 6 * c, 2 * c, self.tdim, rng),
            ResBlock(s, f"{prefix}.up2", 4 * c, c, self.tdim, rng),
            ResBlock(s, f"{prefix}.up1", 2 * c, c, self.tdim, rng),
        ]
        self.up_attn8 = _SpatialAttn(s, f"{prefix}.upa8", 2 * c, heads, cross, rng)
        self.out_gn = GroupNorm(s, f"{prefix}.outgn", c)
        self.out_conv = Conv2d(s, f"{prefix}.out", c, 1, 3, rng, zero_init=True)

    def time_embedding(self, t: np.ndarray) -> Tensor:
        base = sinusoidal_embedding(np.asarray(t, dtype=np.float64),
                                    2 * self.config.sd_channels)
        return self.tfc2(self.tfc1(Tensor(base)).gelu())

    def decode(self, stem: Tensor, bottom: Tensor, skips, temb: Tensor,
               context: Tensor) -> Tensor:
        h = self.mid2(self.mid_attn(self.mid1(bottom, temb), context), temb)
        for i, blk in enumerate(self.up):
            h = blk(concat([h, skips[3 - i]], axis=1), temb)
            if i == 1:
                h = self.up_attn8(h, context)
            h = upsample2x(h)
        return self.out_conv(self.out_gn(h + stem).gelu())

    def __call__(self, zt: np.ndarray | Tensor, t, context: np.ndarray) -> Tensor:
        x = zt if isinstance(zt, Tensor) else Tensor(zt)
        ctx = context if isinstance(context, Tensor) else Tensor(context)
        temb = self.time_embedding(np.broadcast_to(np.asarray(t), (x.shape[0],)))
        stem, skips, bottom = self.encoder(x, temb, ctx)
        return self.decode(stem, bottom, skips, temb, ctx)


class ControlledDenoiser:
    """Frozen base plus trainable encoder copy merged via 1x1 zero convs."""

    def __init__(self, base: Denoiser):
        self.base = base
        self.config = base.config
        c = base.config.sd_channels
        s = base.store
        self.store = s
        rng = Rng(base.config.seed, "sd.ctrl.init")
        self.ctrl_tfc1 = Linear(s, "sd.ctrl.tfc1", 2 * c, base.tdim, rng)
        self.ctrl_tfc2 = Linear(s, "sd.ctrl.tfc2", base.tdim, base.tdim, rng)
        self.ctrl_enc = _Encoder(s, "sd.ctrl.enc", c, base.tdim,
                                 base.config.embed_dim, 4, rng)
        # zero-initialized text projection: pooled text -> input-channel bias
        self.txt_proj = Linear(s, "sd.ctrl.txt", base.config.embed_dim, 1, rng,
                               zero_init=True)
        widths = [c, 2 * c, 3 * c, 4 * c]
        self.zero_convs = [Conv2d(s, f"sd.ctrl.zconv{i + 1}", w, w, 1, rng,
                                  zero_init=True) for i, w in enumerate(widths)]
        self._copy_encoder_weights()

    def _copy_encoder_weights(self):
        for name, p in list(self.store.params.items()):
            if name.startswith("sd.ctrl.enc.") or name.startswith("sd.ctrl.tfc"):
                src = name.replace("sd.ctrl.", "sd.base.", 1)
                p.data = self.store.params[src].data.copy()

    def __call__(self, zt: np.ndarray | Tensor, t,
                 context: np.ndarray, pooled: np.ndarray) -> Tensor:
        x = zt if isinstance(zt, Tensor) else Tensor(zt)
        ctx = context if isinstance(context, Tensor) else Tensor(context)
        tarr = np.broadcast_to(np.asarray(t), (x.shape[0],))
        temb = self.base.time_embedding(tarr)
        stem, skips, bottom = self.base.encoder(x, temb, ctx)
        base_sin = sinusoidal_embedding(np.asarray(tarr, dtype=np.float64),
                                        2 * self.config.sd_channels)
        ctemb = self.ctrl_tfc2(self.ctrl_tfc1(Tensor(base_sin)).gelu())
        bias = self.txt_proj(Tensor(pooled)).reshape(x.shape[0], 1, 1, 1)
        _, ctrl_skips, _ = self.ctrl_enc(x + bias, ctemb, ctx)
        merged = [sk + zc(cs) for sk, zc, cs in
                  zip(skips, self.zero_convs, ctrl_skips)]
        return self.base.decode(stem, bottom, merged, temb, ctx)


# ---------------------------------------------------------------------------
# conditioning helpers


def condition_matrix(conds: list[TextCondition], length: int = COND_LEN) -> np.ndarray:
    """(B, length, D): token rows truncated or padded with the pooled vector."""
    out = np.stack([
        np.concatenate([c.tokens[:length],
                        np.tile(c.pooled, (max(0, length - len(c.tokens)), 1))])
        for c in conds])
    return out.astype(np.float64)


def pooled_matrix(conds: list[TextCondition]) -> np.ndarray:
    return np.stack([c.pooled for c in conds]).astype(np.float64)


def pixels_to_signal(px: np.ndarray) -> np.ndarray:
    """[0,1] grayscale -> [-1,1] single-channel planes."""
    x = px * 2.0 - 1.0
    return x[:, None] if x.ndim == 3 else x


def signal_to_pixels(z: np.ndarray) -> np.ndarray:
    return np.clip((np.squeeze(z, axis=1) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# objective


def sd_loss(model, schedule: NoiseSchedule, z0: np.ndarray, context: np.ndarray,
            rng: Rng, pooled: np.ndarray | None = None) -> Tensor:
    """Eq.-style noise-prediction MSE with t ~ U[1, T] per sample."""
    if len(z0) == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.steps + 1, (len(z0),))
    eps = rng.normal(z0.shape)
    zt = schedule.q_sample(z0, t, eps)
    pred = model(zt, t, context) if pooled is None else \
        model(zt, t, context, pooled)
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred, dtype=np.float64))
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# training


def _load_conditioned_split(corpus_dir, split, aligner: Aligner):
    records = load_split(corpus_dir, split)
    pixels = np.stack([load_image(corpus_dir, split, r.record_id)
                       for r in records])
    conds = [aligner.encode_text(r.text) for r in records]
    return records, pixels_to_signal(pixels), conds


def train_base(corpus_dir, aligner: Aligner, config: Config, log=print):
    """Train the base denoiser; ~10% of batches use the empty condition."""
    schedule = NoiseSchedule(config.diffusion_steps, config.beta_start,
                             config.beta_end)
    _, z0, conds = _load_conditioned_split(corpus_dir, "train", aligner)
    _, vz0, vconds = _load_conditioned_split(corpus_dir, "val", aligner)
    ctx = condition_matrix(conds)
    vctx = condition_matrix(vconds)
    empty = condition_matrix([aligner.empty_condition()])

    model = Denoiser(config)
    opt = Adam(model.store.params, lr=config.sd_lr)
    graph = Graph(model.store.params)
    data_rng = Rng(config.seed, "sd.data")
    noise_rng = Rng(config.seed, "sd.noise")
    history = []
    for epoch in range(config.sd_epochs):
        frac = epoch / max(1, config.sd_epochs - 1)
        opt.lr = config.sd_lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))
        order = data_rng.permutation(len(z0))
        losses = []
        for start in range(0, len(order), config.sd_batch):
            idx = order[start:start + config.sd_batch]
            batch_ctx = ctx[idx]
            if data_rng.uniform() < config.uncond_rate:
                batch_ctx = np.repeat(empty, len(idx), axis=0)
            loss = sd_loss(model, schedule, z0[idx], batch_ctx, noise_rng)
            opt.step(forward_backward(graph, loss))
            losses.append(loss.item())
        val = validate_sd(model, schedule, vz0, vctx, Rng(config.seed, "sd.val"),
                          config.sd_batch)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "val_loss": val})
        log(f"[sd.base] epoch {epoch} loss {np.mean(losses):.4f} val {val:.4f}")
    return model, schedule, history


def validate_sd(model, schedule, z0, ctx, rng: Rng, batch: int,
                pooled=None) -> float:
    vals = []
    for start in range(0, len(z0), batch):
        sl = slice(start, start + batch)
        p = None if pooled is None else pooled[sl]
        vals.append(sd_loss(model, schedule, z0[sl], ctx[sl], rng, p).item()
                    * (min(len(z0), start + batch) - start))
    return float(np.sum(vals) / len(z0))


def attach_control_and_finetune(base: Denoiser, corpus_dir, aligner: Aligner,
                                config: Config, log=print):
    """Freeze the base, attach the branch, train only sd.ctrl.* parameters."""
    schedule = NoiseSchedule(config.diffusion_steps, config.beta_start,
                             config.beta_end)
    model = ControlledDenoiser(base)
    _, z0, conds = _load_conditioned_split(corpus_dir, "train", aligner)
    _, vz0, vconds = _load_conditioned_split(corpus_dir, "val", aligner)
    ctx, pooled = condition_matrix(conds), pooled_matrix(conds)
    vctx, vpooled = condition_matrix(vconds), pooled_matrix(vconds)
    empty_ctx = condition_matrix([aligner.empty_condition()])
    empty_pooled = pooled_matrix([aligner.empty_condition()])

    trainable = {n: p for n, p in model.store.params.items()
                 if n.startswith("sd.ctrl.")}
    frozen = [n for n in model.store.params if n.startswith("sd.base.")]
    for n in frozen:
        model.store.params[n].requires_grad = False
    try:
        opt = Adam(trainable, lr=config.sd_lr)
        graph = Graph(trainable)
        data_rng = Rng(config.seed, "sd.ctrl.data")
        noise_rng = Rng(config.seed, "sd.ctrl.noise")
        history = []
        for epoch in range(config.ctrl_epochs):
            order = data_rng.permutation(len(z0))
            losses = []
            for start in range(0, len(order), config.sd_batch):
                idx = order[start:start + config.sd_batch]
                batch_ctx, batch_pooled = ctx[idx], pooled[idx]
                # condition dropout so the branch supports classifier-free
                # guidance at sampling time
                if data_rng.uniform() < config.uncond_rate:
                    batch_ctx = np.repeat(empty_ctx, len(idx), axis=0)
                    batch_pooled = np.repeat(empty_pooled, len(idx), axis=0)
                loss = sd_loss(model, schedule, z0[idx], batch_ctx, noise_rng,
                               batch_pooled)
                opt.step(forward_backward(graph, loss))
                losses.append(loss.item())
            val = validate_sd(model, schedule, vz0, vctx,
                              Rng(config.seed, "sd.ctrl.val"), config.sd_batch,
                              vpooled)
            history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                            "val_loss": val})
            log(f"[sd.ctrl] epoch {epoch} loss {np.mean(losses):.4f} val {val:.4f}")
    finally:
        for n in frozen:
            model.store.params[n].requires_grad = True
    return model, schedule, history


# ---------------------------------------------------------------------------
# sampling and persistence


def sample(model, schedule: NoiseSchedule, aligner: Aligner, prompt: str,
           seed: int, size: int = 64, batch: int = 1,
           guidance: float = 1.0, guidance_stride: int = 1) -> np.ndarray:
    """Reverse chain from pure noise; returns [0,1] pixels (batch, H, W)."""
    cond = aligner.encode_text(prompt)
    ctx = condition_matrix([cond] * batch)
    pooled = pooled_matrix([cond] * batch)
    return _reverse_chain(model, schedule, ctx, pooled, seed, size, batch,
                          guidance, aligner, guidance_stride)


def sample_prompts(model, schedule: NoiseSchedule, aligner: Aligner,
                   prompts: list[str], seed: int, size: int = 64,
                   batch: int = 16, guidance: float = 1.0,
                   guidance_stride: int = 1) -> np.ndarray:
    """One image per prompt, batching mixed prompts through shared chains."""
    conds = [aligner.encode_text(p) for p in prompts]
    out = []
    for start in range(0, len(conds), batch):
        chunk = conds[start:start + batch]
        ctx = condition_matrix(chunk)
        pooled = pooled_matrix(chunk)
        out.append(_reverse_chain(model, schedule, ctx, pooled, seed + start,
                                  size, len(chunk), guidance, aligner,
                                  guidance_stride))
    return np.concatenate(out)


def _predict_eps(model, z, t, ctx, pooled):
    controlled = isinstance(model, ControlledDenoiser)
    return (model(z, t, ctx, pooled) if controlled
            else model(z, t, ctx)).data.astype(np.float64)


def _reverse_chain(model, schedule: NoiseSchedule, ctx, pooled, seed: int,
                   size: int, batch: int, guidance: float = 1.0,
                   aligner: Aligner | None = None,
                   guidance_stride: int = 1) -> np.ndarray:
    if guidance != 1.0 and aligner is None:
        raise ValueError("guidance needs the aligner for the empty condition")
    rng = Rng(seed, "sd.sample")
    z = rng.normal((batch, 1, size, size))
    if guidance != 1.0:
        empty = [aligner.empty_condition()] * batch
        empty_ctx = condition_matrix(empty)
        empty_pooled = pooled_matrix(empty)
    for t in range(schedule.steps, 0, -1):
        eps_hat = _predict_eps(model, z, t, ctx, pooled)
        if guidance != 1.0 and (t % guidance_stride == 0 or t <= 6):
            # classifier-free guidance against the empty condition; guiding
            # every Nth step plus the final low-noise steps keeps the effect
            # while skipping most of the extra unconditional passes
            unc = _predict_eps(model, z, t, empty_ctx, empty_pooled)
            eps_hat = unc + guidance * (eps_hat - unc)
        # clamp the implied clean signal to the valid range; guidance can
        # otherwise push the chain into over-saturated states
        x0 = np.clip(schedule.predict_x0(z, t, eps_hat), -1.0, 1.0)
        eps_hat = (z - schedule.alpha[t] * x0) / schedule.sigma[t]
        z = schedule.reverse_step(z, t, eps_hat, rng)
    return signal_to_pixels(z)


def save_model(path, model, config: Config) -> None:
    ckpt.save_checkpoint(path, model.store.state(),
                         meta={"config_hash": config.hash(),
                               "controlled": isinstance(model, ControlledDenoiser)})


def load_model(path, config: Config):
    tensors, meta = ckpt.load_checkpoint(path)
    base = Denoiser(config)
    model = ControlledDenoiser(base) if meta.get("controlled") else base
    model.store.load_state(tensors)
    schedule = NoiseSchedule(config.diffusion_steps, config.beta_start,
                             config.beta_end)
    return model, schedule
