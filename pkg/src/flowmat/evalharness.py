"""Metrics, classical baselines and the reproducible experiment runner."""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataio
from .channel import (MultipathProfile, PilotPattern, SystemGeometry,
                      compute_precoders, every_kth_pattern, generate_batch,
                      interpolate_frequency, ls_estimate, observe_pilots)
from .model import (FlowMatModel, ModelConfig, estimate_pipeline,
                    feedback_pipeline, tokenize_eigen)
from .quantizer import (UniformQuantizerSpec, calibrate_uniform, make_codebook,
                        payload_bits, uniform_dequantize, uniform_quantize)
from .training import TrainConfig, train_feedback, train_joint_estimation, \
    train_progressive, train_splited, train_end_to_end
from .autodiff import Tensor

NMSE_FLOOR_DB = -120.0


class ConfigError(ValueError):
    """Raised for unknown keys or malformed values in a run configuration."""


class DataError(ValueError):
    """Raised when referenced datasets are missing or malformed."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def nmse_db(estimate, truth) -> float:
    """10 log10( sum|err|^2 / sum|truth|^2 ), clamped at -120 dB."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError("estimate/truth shape mismatch")
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0.0:
        raise ValueError("all-zero truth")
    num = float(np.sum(np.abs(estimate - truth) ** 2))
    if num == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(num / denom), NMSE_FLOOR_DB)


def rho(w_true, w_pred) -> float:
    """Mean |<w, w'>| / (||w|| ||w'||) over all rows of all samples."""
    w_true = np.asarray(w_true)
    w_pred = np.asarray(w_pred)
    if w_true.shape != w_pred.shape:
        raise ValueError("eigenvector batch shape mismatch")
    rows_t = w_true.reshape(-1, w_true.shape[-1])
    rows_p = w_pred.reshape(-1, w_pred.shape[-1])
    nt = np.linalg.norm(rows_t, axis=1)
    np_ = np.linalg.norm(rows_p, axis=1)
    if np.any(nt == 0.0) or np.any(np_ == 0.0):
        raise ValueError("zero-norm eigenvector row")
    inner = np.abs(np.sum(rows_t.conj() * rows_p, axis=1))
    return float(np.mean(inner / (nt * np_)))


def freq_correlation(x: np.ndarray) -> np.ndarray:
    """|<x_i, x_j>| / (||x_i|| ||x_j||) over spatial vectors per frequency unit.

    Accepts a channel tensor [rx, subcarrier, tx] or an eigen matrix
    [subband, tx]. Zero-norm vectors give NaN cells with a warning.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        vecs = np.transpose(x, (1, 0, 2)).reshape(x.shape[1], -1)
    elif x.ndim == 2:
        vecs = x
    else:
        raise ValueError("expect a 2-D or 3-D complex array")
    if vecs.shape[0] < 2:
        raise ValueError("need at least 2 frequency units")
    norms = np.linalg.norm(vecs, axis=1)
    gram = np.abs(vecs.conj() @ vecs.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = gram / np.outer(norms, norms)
    if np.any(norms == 0.0):
        warnings.warn("zero-norm frequency vector: NaN correlation cells")
    return corr


def baseline_truncation(w: np.ndarray, bits, quant_bits: int = 2) -> np.ndarray:
    """Non-learned feedback baseline at a given bit budget.

    Keeps the first subbands that fit (each costs 2*n_tx*quant_bits bits for
    its uniformly quantized real/imag parts), holds the last kept row for the
    rest, and renormalizes. ``bits=None`` means an unconstrained budget.
    """
    n_subband, n_tx = w.shape
    if bits is None or math.isinf(bits):
        keep = n_subband
        out = w.astype(np.complex128).copy()
    else:
        cost = 2 * n_tx * quant_bits
        keep = min(int(bits) // cost, n_subband)
        if keep < 1:
            raise ValueError(f"budget {bits} cannot keep any subband")
        spec = UniformQuantizerSpec(bits=quant_bits, lo=-1.0, hi=1.0)
        out = np.empty_like(w, dtype=np.complex128)
        for b in range(keep):
            re = uniform_dequantize(uniform_quantize(w[b].real, spec)[0], spec)
            im = uniform_dequantize(uniform_quantize(w[b].imag, spec)[0], spec)
            out[b] = re + 1j * im
    out[keep:] = out[keep - 1]  # hold interpolation
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    # task / orchestration
    "task": "feedback",            # feedback | estimate | joint
    "regime": "progressive",       # progressive | joint | end_to_end | splited
    "seed": 0,
    # geometry
    "n_tx": 8,
    "n_rx": 2,
    "n_sub": 32,
    "n_subband": 8,
    "pilot_step": 2,
    "pilot_offset": 0,
    "subcarrier_spacing": 15e3,
    # multipath profile
    "n_paths": 3,
    "delay_spread": 3e-7,
    "angle_spread": math.pi,
    # dataset
    "n_samples": 64,
    "train_fraction": 0.95,
    # model
    "d_model": 64,
    "n_heads": 4,
    "encoder_depth": 3,
    "decoder_depth": 3,
    "d_latent": 4,
    "keep_count": 4,
    "mask_mode": "hard",
    "mask_token_init": "zero",
    "mask_token_trainable": True,
    "learnable_query": True,
    "share_projections": False,
    "token_reduction": "query",
    "mlp_expansion": 2,
    "denoiser_blocks": 2,
    "denoiser_expansion": 2,
    # training
    "steps": 1000,
    "batch_size": 16,
    "lr": 1e-3,
    "lr_schedule": "cosine",
    "snr_db_min": 10.0,
    "snr_db_max": 10.0,
    "loss_mode": "canonical",
    "eig_iterations": 30,
    # quantization / evaluation
    "quantizer": "uniform",        # uniform | vq | float
    "finetune_steps": 1000,        # quantization-aware steps per bit budget
    "vq_codebook_size": 256,
    "budgets": "64,128,256",
    "eval_snrs_db": "0,10,20",
    "eval_trials": 32,
}


def parse_config(path) -> dict:
    """Flat key=value text file over the DEFAULTS schema."""
    cfg = dict(DEFAULTS)
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if value not in ("true", "false", "True", "False"):
                    raise ValueError(value)
                cfg[key] = value in ("true", "True")
            elif isinstance(default, int):
                cfg[key] = int(value)
            elif isinstance(default, float):
                cfg[key] = float(value)
            else:
                cfg[key] = value
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _geometry(cfg: dict) -> SystemGeometry:
    pattern = every_kth_pattern(cfg["n_sub"], cfg["pilot_step"],
                                cfg["pilot_offset"])
    return SystemGeometry(n_tx=cfg["n_tx"], n_rx=cfg["n_rx"],
                          n_sub=cfg["n_sub"], n_subband=cfg["n_subband"],
                          pilot_pattern=pattern,
                          subcarrier_spacing=cfg["subcarrier_spacing"])


def _profile(cfg: dict) -> MultipathProfile:
    return MultipathProfile(n_paths=cfg["n_paths"],
                            delay_spread=cfg["delay_spread"],
                            angle_spread=cfg["angle_spread"],
                            seed=cfg["seed"])


def make_dataset(cfg: dict):
    """Synthesize channels and their eigen-precoder labels; 95/5 split by
    sample index (first block trains, last block tests)."""
    geom = _geometry(cfg)
    channels = generate_batch(geom, _profile(cfg), cfg["n_samples"])
    eigens = [compute_precoders(h, geom) for h in channels]
    n_train = min(int(cfg["train_fraction"] * len(channels)),
                  len(channels) - 1)
    return geom, channels, eigens, n_train


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(regime=cfg["regime"], steps=cfg["steps"],
                       batch_size=cfg["batch_size"], lr=cfg["lr"],
                       lr_schedule=cfg["lr_schedule"], seed=cfg["seed"],
                       snr_db_min=cfg["snr_db_min"],
                       snr_db_max=cfg["snr_db_max"],
                       loss_mode=cfg["loss_mode"],
                       eig_iterations=cfg["eig_iterations"])


def feedback_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(n_tokens=cfg["n_subband"], token_dim=2 * cfg["n_tx"],
                       d_model=cfg["d_model"], n_heads=cfg["n_heads"],
                       encoder_depth=cfg["encoder_depth"],
                       decoder_depth=cfg["decoder_depth"],
                       d_latent=cfg["d_latent"], keep_count=cfg["keep_count"],
                       mask_mode=cfg["mask_mode"],
                       mask_token_init=cfg["mask_token_init"],
                       mask_token_trainable=cfg["mask_token_trainable"],
                       learnable_query=cfg["learnable_query"],
                       share_projections=cfg["share_projections"],
                       token_reduction=cfg["token_reduction"],
                       mlp_expansion=cfg["mlp_expansion"], seed=cfg["seed"])


def estimation_model_config(cfg: dict, geom: SystemGeometry) -> ModelConfig:
    return ModelConfig(n_tokens=cfg["n_sub"],
                       token_dim=2 * cfg["n_tx"] * cfg["n_rx"],
                       d_model=cfg["d_model"], n_heads=cfg["n_heads"],
                       encoder_depth=cfg["encoder_depth"],
                       decoder_depth=cfg["decoder_depth"],
                       d_latent=cfg["d_latent"],
                       keep_count=geom.pilot_pattern.n_pilots,
                       mask_mode=cfg["mask_mode"],
                       mask_token_init=cfg["mask_token_init"],
                       mask_token_trainable=cfg["mask_token_trainable"],
                       learnable_query=cfg["learnable_query"],
                       share_projections=cfg["share_projections"],
                       mlp_expansion=cfg["mlp_expansion"],
                       denoiser_blocks=cfg["denoiser_blocks"],
                       denoiser_expansion=cfg["denoiser_expansion"],
                       n_pilot_tokens=geom.pilot_pattern.n_pilots,
                       seed=cfg["seed"])


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    task: str
    nmse_db: float
    rho: float
    bit_budget: int
    sample_count: int
    seed: int
    config_hash: str
    method: str = "flowmat"

    def __post_init__(self):
        if not (math.isnan(self.rho) or 0.0 <= self.rho <= 1.0 + 1e-12):
            raise ValueError("rho outside [0, 1]")


def write_results_csv(path, results) -> None:
    lines = ["task,method,bit_budget,nmse_db,rho,sample_count,seed,config_hash"]
    for r in results:
        lines.append(f"{r.task},{r.method},{r.bit_budget},{r.nmse_db!r},"
                     f"{r.rho!r},{r.sample_count},{r.seed},{r.config_hash}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Latent calibration and feedback evaluation
# ---------------------------------------------------------------------------


def collect_latents(model: FlowMatModel, eigens) -> np.ndarray:
    aux = {}
    tokens = np.stack([tokenize_eigen(w) for w in eigens])
    model.feedback_forward(Tensor(tokens), aux=aux)
    return aux["latent"].data


def eval_feedback(model: FlowMatModel, eigens, quantizer=None) -> float:
    recs, refs = [], []
    for w in eigens:
        _, w_rec = feedback_pipeline(w, model, quantizer=quantizer)
        recs.append(w_rec)
        refs.append(w)
    return rho(np.stack(refs), np.stack(recs))


def eval_estimation(model: FlowMatModel, channels, geom: SystemGeometry,
                    snr_db: float, seed: int, trials_per_channel: int = 1):
    """(model NMSE dB, LS+linear-interpolation NMSE dB) on the given set."""
    model_err = truth_pow = ls_err = 0.0
    rng = np.random.default_rng(seed)
    for h in channels:
        for _ in range(trials_per_channel):
            obs = observe_pilots(h, geom, snr_db, seed=int(rng.integers(2**31)))
            est = estimate_pipeline(obs, model, geom.n_rx, geom.n_tx)
            ls = interpolate_frequency(ls_estimate(obs),
                                       geom.pilot_pattern.pilot_indices,
                                       geom.n_sub)
            model_err += float(np.sum(np.abs(est - h) ** 2))
            ls_err += float(np.sum(np.abs(ls - h) ** 2))
            truth_pow += float(np.sum(np.abs(h) ** 2))
    to_db = lambda e: max(10.0 * math.log10(max(e, 1e-300) / truth_pow),
                          NMSE_FLOOR_DB)
    return to_db(model_err), to_db(ls_err)


def _budget_quantizer(cfg: dict, model: FlowMatModel, train_eigens,
                      budget: int):
    """Quantizer instance hitting the budget exactly, or ConfigError."""
    m, d_q = cfg["keep_count"], cfg["d_latent"]
    if cfg["quantizer"] == "uniform":
        per_scalar = budget // (m * d_q)
        if per_scalar * m * d_q != budget or not 1 <= per_scalar <= 16:
            raise ConfigError(
                f"budget {budget} not reachable with m={m}, d_latent={d_q}")
        lats = collect_latents(model, train_eigens)
        spec = calibrate_uniform(lats, per_scalar)
        model.metadata[f"uq_lo_{budget}"] = spec.lo
        model.metadata[f"uq_hi_{budget}"] = spec.hi
        return spec
    if cfg["quantizer"] == "vq":
        k = cfg["vq_codebook_size"]
        if payload_bits("vq", m, d_q, k=k) != budget:
            raise ConfigError(f"VQ budget {budget} needs m*log2(K) == budget")
        return make_codebook(k, d_q, seed=cfg["seed"])
    raise ConfigError(f"unknown quantizer {cfg['quantizer']!r}")


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------


def run_experiment(cfg: dict, out_dir) -> list:
    """gen -> train -> eval per the configuration; emits CSV reports.

    Returns the list of EvalResult rows (also written to results.csv).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    chash = config_hash(cfg)
    geom, channels, eigens, n_train = make_dataset(cfg)
    tcfg = _train_config(cfg)
    results = []

    if cfg["task"] == "feedback":
        model = FlowMatModel(feedback_model_config(cfg))
        report = train_feedback(model, eigens[:n_train], tcfg)
        report.write_csv(out / "loss_curve.csv")
        base = {k: t.data.copy() for k, t in model.params.items()}
        for budget in _budget_list(cfg):
            quant = _budget_quantizer(cfg, model, eigens[:n_train], budget)
            if cfg["finetune_steps"] > 0:
                ft = replace(tcfg, steps=cfg["finetune_steps"],
                             lr=0.25 * tcfg.lr)
                train_feedback(model, eigens[:n_train], ft, quantizer=quant)
            r = eval_feedback(model, eigens[n_train:], quantizer=quant)
            results.append(EvalResult("feedback", float("nan"), r, budget,
                                      len(eigens) - n_train, cfg["seed"],
                                      chash))
            trunc = [baseline_truncation(w, budget) for w in eigens[n_train:]]
            r_tr = rho(np.stack(eigens[n_train:]), np.stack(trunc))
            results.append(EvalResult("feedback", float("nan"), r_tr, budget,
                                      len(eigens) - n_train, cfg["seed"],
                                      chash, method="truncation"))
            for name, t in model.params.items():
                t.data[...] = base[name]
        model.save(out / "feedback.fmw")
        _write_budget_curve(out / "budget_vs_rho.csv", results)

    elif cfg["task"] == "estimate":
        model = FlowMatModel(estimation_model_config(cfg, geom))
        if cfg["regime"] == "joint":
            report = train_joint_estimation(model, channels[:n_train], geom,
                                            tcfg)
        else:
            report = train_progressive(model, channels[:n_train], geom, tcfg)
        report.write_csv(out / "loss_curve.csv")
        rows = ["snr_db,model_nmse_db,ls_nmse_db"]
        for snr in _snr_list(cfg):
            mdl_db, ls_db = eval_estimation(model, channels[n_train:], geom,
                                            snr, seed=cfg["seed"] + 1)
            rows.append(f"{snr!r},{mdl_db!r},{ls_db!r}")
            results.append(EvalResult("estimation", mdl_db, float("nan"), 0,
                                      len(channels) - n_train, cfg["seed"],
                                      chash))
            results.append(EvalResult("estimation", ls_db, float("nan"), 0,
                                      len(channels) - n_train, cfg["seed"],
                                      chash, method="ls_interp"))
        (out / "snr_vs_nmse.csv").write_text("\n".join(rows) + "\n")
        model.save(out / "estimation.fmw")

    elif cfg["task"] == "joint":
        est_model = FlowMatModel(estimation_model_config(cfg, geom))
        fb_model = FlowMatModel(feedback_model_config(cfg))
        if cfg["regime"] == "end_to_end":
            report = train_end_to_end(est_model, fb_model, channels[:n_train],
                                      geom, tcfg)
            report.write_csv(out / "loss_curve.csv")
        else:  # splited
            est_rep, fb_rep = train_splited(est_model, fb_model,
                                            channels[:n_train], geom, tcfg)
            est_rep.write_csv(out / "loss_curve_estimation.csv")
            fb_rep.write_csv(out / "loss_curve_feedback.csv")
        rho_val = eval_joint(est_model, fb_model, channels[n_train:], eigens[n_train:],
                             geom, cfg)
        results.append(EvalResult("joint", float("nan"), rho_val, 0,
                                  len(channels) - n_train, cfg["seed"], chash,
                                  method=cfg["regime"]))
        est_model.save(out / "estimation.fmw")
        fb_model.save(out / "feedback.fmw")
    else:
        raise ConfigError(f"unknown task {cfg['task']!r}")

    write_results_csv(out / "results.csv", results)
    manifest = {
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_hash": chash,
        "artifacts": sorted(p.name for p in out.iterdir()),
        "started": started,
        "finished": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return results


def eval_joint(est_model, fb_model, channels, eigens, geom, cfg) -> float:
    """Composed estimation + feedback Rho on frozen models."""
    rng = np.random.default_rng(cfg["seed"] + 2)
    preds, refs = [], []
    for h, w in zip(channels, eigens):
        snr = 0.5 * (cfg["snr_db_min"] + cfg["snr_db_max"])
        obs = observe_pilots(h, geom, snr, seed=int(rng.integers(2**31)))
        h_est = estimate_pipeline(obs, est_model, geom.n_rx, geom.n_tx)
        w_est = compute_precoders(h_est, geom)
        _, w_rec = feedback_pipeline(w_est, fb_model)
        preds.append(w_rec)
        refs.append(w)
    return rho(np.stack(refs), np.stack(preds))


def analyze_corr(cfg: dict, out_path) -> np.ndarray:
    """Frequency-correlation matrix of one synthesized channel, as CSV."""
    geom = _geometry(cfg)
    h = generate_batch(geom, _profile(cfg), 1)[0]
    corr = freq_correlation(h)
    lines = [",".join(repr(float(v)) for v in row) for row in corr]
    Path(out_path).write_text("\n".join(lines) + "\n")
    return corr


def _budget_list(cfg: dict):
    try:
        return [int(b) for b in str(cfg["budgets"]).split(",") if b.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad budgets list: {exc}")


def _snr_list(cfg: dict):
    try:
        return [float(s) for s in str(cfg["eval_snrs_db"]).split(",")
                if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad eval_snrs_db list: {exc}")


def _write_budget_curve(path, results) -> None:
    lines = ["bit_budget,method,rho"]
    for r in results:
        lines.append(f"{r.bit_budget},{r.method},{r.rho!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_dataset(cfg: dict, out_path, kind: str = "channel") -> int:
    """Synthesize and write a dataset container; returns the sample count."""
    geom, channels, eigens, _ = make_dataset(cfg)
    if kind == "channel":
        dataio.write_records(out_path, dataio.KIND_CHANNEL, channels)
    elif kind == "eigen":
        dataio.write_records(out_path, dataio.KIND_EIGEN, eigens)
    elif kind == "pilot":
        rng = np.random.default_rng(cfg["seed"] + 3)
        obs = [observe_pilots(h, geom, cfg["snr_db_min"],
                              seed=int(rng.integers(2**31))).data
               for h in channels]
        dataio.write_records(out_path, dataio.KIND_PILOT, obs)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return cfg["n_samples"]
