"""Loss functions and training regimes.

Three compositions are supported for the joint task: ``progressive``
(denoiser first, then the completion decoder with the denoiser frozen),
``joint`` (both reconstruction losses at once), ``end_to_end`` (pilots
through estimation, differentiable eigen extraction, and the feedback
model under a single similarity loss) and ``splited`` (independent
training, composed only at evaluation time).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import quantizer as qz
from .autodiff import Adam, Tensor
from .channel import SystemGeometry, observe_pilots
from .model import FlowMatModel, tokenize_channel, tokenize_eigen


class DivergenceError(RuntimeError):
    """Loss exceeded 10x its initial value for too many consecutive steps."""


@dataclass
class TrainConfig:
    regime: str = "progressive"   # progressive | joint | end_to_end | splited
    steps: int = 1000             # steps per phase
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = "cosine"   # cosine | constant
    seed: int = 0
    snr_db_min: float = 10.0
    snr_db_max: float = 10.0
    loss_mode: str = "canonical"  # canonical | paper_literal
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    eig_iterations: int = 30      # unrolled power-iteration depth (end_to_end)
    phase_augment: bool = True    # random global phase rotation per sample

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be positive")
        if self.regime not in ("progressive", "joint", "end_to_end", "splited"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.loss_mode not in ("canonical", "paper_literal"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0

    def write_csv(self, path) -> None:
        lines = ["step,loss,phase"]
        lines += [f"{i},{loss!r},{phase}" for i, (loss, phase)
                  in enumerate(zip(self.losses, self.phases))]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> str:
        parts = [f"seed={self.seed}", f"steps={len(self.losses)}",
                 f"wall_time_s={self.wall_time:.2f}"]
        parts += [f"{k}={v}" for k, v in sorted(self.final_metrics.items())]
        return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Losses (all differentiable, operating on real token arrays)
# ---------------------------------------------------------------------------


def loss_ce(pred: Tensor, target: np.ndarray, mode: str = "canonical") -> Tensor:
    """Normalized root squared error sqrt(sum(err^2) / denominator).

    canonical divides by the target energy; paper_literal divides by the
    prediction energy as the training equations are written.
    """
    target = np.asarray(target, dtype=np.float64)
    err = ad.sub(pred, Tensor(target))
    num = ad.tsum(ad.square(err))
    if mode == "canonical":
        denom = float((target**2).sum())
        if denom == 0.0:
            raise ZeroDivisionError("all-zero targets in canonical mode")
        return ad.sqrt(ad.mul(num, 1.0 / denom))
    if mode == "paper_literal":
        return ad.sqrt(ad.div(num, ad.tsum(ad.square(pred))))
    raise ValueError(f"unknown loss mode {mode!r}")


# the pilot-domain and full-grid losses share one formula; the distinction
# is which token set they are fed
loss_ce1 = loss_ce
loss_ce2 = loss_ce

_RHO_EPS = 1e-24


def rho_tokens(pred: Tensor, true: np.ndarray) -> Tensor:
    """Mean |<w, w'>| / (||w|| ||w'||) over token rows, on the graph.

    Tokens are [re halves | im halves]; the inner product is the complex one
    reconstructed from the two halves.
    """
    true = np.asarray(true, dtype=np.float64)
    half = true.shape[-1] // 2
    pr = ad.narrow(pred, -1, 0, half)
    pi = ad.narrow(pred, -1, half, 2 * half)
    tr, ti = Tensor(true[..., :half]), Tensor(true[..., half:])
    num_re = ad.rowsum(ad.add(ad.mul(tr, pr), ad.mul(ti, pi)))
    num_im = ad.rowsum(ad.sub(ad.mul(tr, pi), ad.mul(ti, pr)))
    num = ad.sqrt(ad.add(ad.add(ad.square(num_re), ad.square(num_im)),
                         Tensor(_RHO_EPS)))
    p_norm = ad.sqrt(ad.add(ad.rowsum(ad.add(ad.square(pr), ad.square(pi))),
                            Tensor(_RHO_EPS)))
    t_norm = np.sqrt((true**2).sum(axis=-1, keepdims=True))
    if np.any(t_norm == 0.0):
        raise ZeroDivisionError("zero-norm row in the reference eigenvectors")
    cells = ad.div(num, ad.mul(p_norm, Tensor(t_norm)))
    return ad.tmean(cells)


def loss_cf(pred: Tensor, true: np.ndarray) -> Tensor:
    """1 - Rho: the minimized complement of the similarity metric."""
    return ad.sub(Tensor(1.0), rho_tokens(pred, true))


# ---------------------------------------------------------------------------
# Differentiable eigen extraction (end-to-end regime)
# ---------------------------------------------------------------------------


def differentiable_precoders(tokens: Tensor, n_rx: int, n_tx: int,
                             n_subband: int, iterations: int = 30) -> Tensor:
    """Per-subband dominant eigenvector via unrolled power iteration.

    ``tokens`` are channel tokens [..., n_sub, 2*n_rx*n_tx]; the result is
    an eigen token tensor [..., n_subband, 2*n_tx]. The whole computation is
    ordinary graph arithmetic, so gradients flow back into the channel
    estimate. Rows are unit norm by construction (last normalization step).
    """
    half = n_rx * n_tx
    n_sub = tokens.data.shape[-2]
    if n_sub % n_subband != 0:
        raise ValueError("n_subband must divide the subcarrier count")
    size = n_sub // n_subband
    rng = np.random.default_rng(0)
    v0 = rng.standard_normal(n_tx) + 1j * rng.standard_normal(n_tx)
    v0 /= np.linalg.norm(v0)

    rows = []
    for b in range(n_subband):
        sub = ad.narrow(tokens, -2, b * size, (b + 1) * size)
        a_re = a_im = None
        for r in range(n_rx):
            re = ad.narrow(sub, -1, r * n_tx, (r + 1) * n_tx)
            im = ad.narrow(sub, -1, half + r * n_tx, half + (r + 1) * n_tx)
            re_t, im_t = ad.transpose(re), ad.transpose(im)
            term_re = ad.add(ad.matmul(re_t, re), ad.matmul(im_t, im))
            term_im = ad.sub(ad.matmul(re_t, im), ad.matmul(im_t, re))
            a_re = term_re if a_re is None else ad.add(a_re, term_re)
            a_im = term_im if a_im is None else ad.add(a_im, term_im)

        v_re = Tensor(v0.real.reshape(n_tx, 1))
        v_im = Tensor(v0.imag.reshape(n_tx, 1))
        for _ in range(iterations):
            nv_re = ad.sub(ad.matmul(a_re, v_re), ad.matmul(a_im, v_im))
            nv_im = ad.add(ad.matmul(a_re, v_im), ad.matmul(a_im, v_re))
            norm = ad.sqrt(ad.add(
                ad.tsum(ad.add(ad.square(nv_re), ad.square(nv_im)),
                        axis=(-2, -1), keepdims=True),
                Tensor(1e-30)))
            v_re, v_im = ad.div(nv_re, norm), ad.div(nv_im, norm)
        row = ad.concat([ad.transpose(v_re), ad.transpose(v_im)], axis=-1)
        rows.append(row)
    return ad.concat(rows, axis=-2)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class _Guard:
    """Divergence watchdog shared by every loop."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.initial = None
        self.streak = 0

    def check(self, loss: float):
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss}")
        if self.initial is None:
            self.initial = max(abs(loss), 1e-12)
            return
        if loss > self.cfg.divergence_factor * self.initial:
            self.streak += 1
            if self.streak >= self.cfg.divergence_patience:
                raise DivergenceError(
                    f"loss {loss:.3g} above {self.cfg.divergence_factor}x "
                    f"initial for {self.streak} consecutive steps")
        else:
            self.streak = 0


def _step_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    return cfg.lr


def _estimation_batch(channels, geom: SystemGeometry, idx, cfg: TrainConfig,
                      rng):
    """Noisy pilot tokens, clean pilot tokens and full-grid tokens for a
    batch of channel samples; noise is resampled fresh every call.

    With ``phase_augment`` each sample is rotated by a fresh global unit
    phase. Path gains are circularly symmetric, so the rotated channel has
    the same distribution as the original and the rotation only widens the
    effective training set.
    """
    pidx = geom.pilot_pattern.pilot_indices
    noisy, clean, full = [], [], []
    for i in idx:
        h = channels[i]
        if cfg.phase_augment:
            h = h * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
        snr = (cfg.snr_db_min if cfg.snr_db_min == cfg.snr_db_max
               else rng.uniform(cfg.snr_db_min, cfg.snr_db_max))
        obs = observe_pilots(h, geom, snr, seed=int(rng.integers(2**31)))
        noisy.append(tokenize_channel(obs.data))
        clean.append(tokenize_channel(h[:, pidx, :]))
        full.append(tokenize_channel(h))
    return np.stack(noisy), np.stack(clean), np.stack(full)


def train_progressive(model: FlowMatModel, channels, geom: SystemGeometry,
                      cfg: TrainConfig) -> TrainReport:
    """Phase 1 trains the denoiser on the pilot loss; phase 2 freezes it and
    trains the completion decoder on the full-grid loss."""
    t0 = time.perf_counter()
    report = TrainReport(config=asdict(cfg), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    denoiser = ["mix"]
    decoder_side = ["in_proj", "mask_token", "pos", "dec", "out_proj"]

    for phase, prefixes in ((1, denoiser), (2, decoder_side)):
        if phase == 2:
            model.set_trainable(denoiser, False)
        params = model.parameters(prefixes)
        opt = Adam(params, lr=cfg.lr)
        guard = _Guard(cfg)
        for step in range(cfg.steps):
            opt.lr = _step_lr(cfg, step, cfg.steps)
            idx = rng.choice(len(channels), size=min(cfg.batch_size,
                                                     len(channels)),
                             replace=False)
            noisy, clean, full = _estimation_batch(channels, geom, idx, cfg, rng)
            opt.zero_grad()
            if phase == 1:
                den = model.denoise(Tensor(noisy))
                loss = loss_ce1(den, clean, cfg.loss_mode)
            else:
                _, rec = model.estimate_forward(
                    Tensor(noisy), geom.pilot_pattern.pilot_indices)
                loss = loss_ce2(rec, full, cfg.loss_mode)
            loss.backward()
            opt.step()
            val = float(loss.data)
            guard.check(val)
            report.losses.append(val)
            report.phases.append(phase)
    model.set_trainable(denoiser, True)
    report.wall_time = time.perf_counter() - t0
    return report


def train_joint_estimation(model: FlowMatModel, channels,
                           geom: SystemGeometry, cfg: TrainConfig) -> TrainReport:
    """Minimize the pilot and full-grid losses simultaneously."""
    t0 = time.perf_counter()
    report = TrainReport(config=asdict(cfg), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    guard = _Guard(cfg)
    for step in range(cfg.steps):
        opt.lr = _step_lr(cfg, step, cfg.steps)
        idx = rng.choice(len(channels), size=min(cfg.batch_size, len(channels)),
                         replace=False)
        noisy, clean, full = _estimation_batch(channels, geom, idx, cfg, rng)
        opt.zero_grad()
        den, rec = model.estimate_forward(Tensor(noisy),
                                          geom.pilot_pattern.pilot_indices)
        loss = ad.add(loss_ce1(den, clean, cfg.loss_mode),
                      loss_ce2(rec, full, cfg.loss_mode))
        loss.backward()
        opt.step()
        val = float(loss.data)
        guard.check(val)
        report.losses.append(val)
        report.phases.append(1)
    report.wall_time = time.perf_counter() - t0
    return report


def train_feedback(model: FlowMatModel, eigenmatrices, cfg: TrainConfig,
                   quantizer=None) -> TrainReport:
    """Train the compression/feedback autoencoder on 1 - Rho.

    With a VQ codebook quantizer, the codebook and commitment losses are
    added and the codebook vectors train by gradient.
    """
    t0 = time.perf_counter()
    report = TrainReport(config=asdict(cfg), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tokens_all = np.stack([tokenize_eigen(w) for w in eigenmatrices])
    params = model.parameters()
    if isinstance(quantizer, qz.VqCodebook):
        params = params + [quantizer.vectors]
    opt = Adam(params, lr=cfg.lr)
    guard = _Guard(cfg)
    for step in range(cfg.steps):
        opt.lr = _step_lr(cfg, step, cfg.steps)
        idx = rng.choice(len(eigenmatrices),
                         size=min(cfg.batch_size, len(eigenmatrices)),
                         replace=False)
        batch = tokens_all[idx]
        opt.zero_grad()
        aux = {}
        rec, _, _ = model.feedback_forward(Tensor(batch), quantizer=quantizer,
                                           aux=aux)
        loss = loss_cf(rec, batch)
        if isinstance(quantizer, qz.VqCodebook):
            cb_loss, commit = qz.vq_losses(aux["latent_flat"], quantizer,
                                           aux["vq_indices"])
            loss = ad.add(loss, ad.add(cb_loss, commit))
        loss.backward()
        opt.step()
        val = float(loss.data)
        guard.check(val)
        report.losses.append(val)
        report.phases.append(1)
    report.wall_time = time.perf_counter() - t0
    return report


def train_end_to_end(est_model: FlowMatModel, fb_model: FlowMatModel,
                     channels, geom: SystemGeometry,
                     cfg: TrainConfig) -> TrainReport:
    """Pilots -> estimation -> in-graph eigen extraction -> feedback, under
    a single 1 - Rho objective through the whole graph."""
    t0 = time.perf_counter()
    report = TrainReport(config=asdict(cfg), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    from .channel import compute_precoders

    targets = np.stack([tokenize_eigen(compute_precoders(h, geom))
                        for h in channels])
    params = est_model.parameters() + fb_model.parameters()
    opt = Adam(params, lr=cfg.lr)
    guard = _Guard(cfg)
    for step in range(cfg.steps):
        opt.lr = _step_lr(cfg, step, cfg.steps)
        idx = rng.choice(len(channels), size=min(cfg.batch_size, len(channels)),
                         replace=False)
        noisy, _, _ = _estimation_batch(channels, geom, idx, cfg, rng)
        opt.zero_grad()
        _, rec_full = est_model.estimate_forward(
            Tensor(noisy), geom.pilot_pattern.pilot_indices)
        eig_tokens = differentiable_precoders(
            rec_full, geom.n_rx, geom.n_tx, geom.n_subband,
            iterations=cfg.eig_iterations)
        fb_rec, _, _ = fb_model.feedback_forward(eig_tokens)
        loss = loss_cf(fb_rec, targets[idx])
        loss.backward()
        opt.step()
        val = float(loss.data)
        guard.check(val)
        report.losses.append(val)
        report.phases.append(1)
    report.wall_time = time.perf_counter() - t0
    return report


def train_splited(est_model: FlowMatModel, fb_model: FlowMatModel,
                  channels, geom: SystemGeometry, cfg: TrainConfig):
    """Independent training of the two networks; composition happens only at
    evaluation time on frozen parameters (no gradient coupling)."""
    from .channel import compute_precoders

    est_report = train_progressive(est_model, channels, geom, cfg)
    eigens = [compute_precoders(h, geom) for h in channels]
    fb_report = train_feedback(fb_model, eigens, cfg)
    return est_report, fb_report
