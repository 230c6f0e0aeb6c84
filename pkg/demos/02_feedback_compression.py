"""CSI feedback end to end: compress precoders into a small bit payload.

The feedback task takes the per-subband dominant eigenvectors of a channel,
masks half of the token rows, compresses the kept rows into a low-rate
latent, quantizes it, and reconstructs the full precoder matrix on the
other side of the (simulated) feedback link. The figure of merit is Rho,
the mean cosine similarity between true and reconstructed precoders
(1.0 = perfect beamforming direction).

This script drives the experiment harness: it trains a float model on a
narrow-angle two-path channel family, fine-tunes a copy per bit budget
with the quantizer in the loop (straight-through gradients), and compares
against the classical truncation baseline that spends its bits on the
first few subbands verbatim.

Runtime: a few minutes on a laptop CPU.

Run: python3 demos/02_feedback_compression.py
"""

import tempfile
from pathlib import Path

from flowmat.evalharness import DEFAULTS, run_experiment

cfg = dict(DEFAULTS, n_paths=2, angle_spread=1.0, n_samples=1024,
           steps=10_000, batch_size=32, lr=2e-3, d_model=32,
           encoder_depth=2, decoder_depth=2)

print(f"dataset: {cfg['n_samples']} channels, {cfg['n_paths']} paths, "
      f"angle spread {cfg['angle_spread']} rad")
print(f"training: {cfg['steps']} float steps, then {cfg['finetune_steps']} "
      f"quantization-aware steps per bit budget")
print("working...")
print()

out_dir = Path(tempfile.mkdtemp()) / "run"
results = run_experiment(cfg, out_dir)

flowmat = {r.bit_budget: r.rho for r in results if r.method == "flowmat"}
trunc = {r.bit_budget: r.rho for r in results if r.method == "truncation"}

print(f"{'budget (bits)':>13} {'flowmat':>8} {'truncation':>10}")
for budget in sorted(flowmat):
    print(f"{budget:>13} {flowmat[budget]:>8.4f} {trunc[budget]:>10.4f}")

print()
print(f"artifacts written to {out_dir} (results.csv, budget_vs_rho.csv,")
print("loss_curve.csv, feedback.fmw checkpoint, manifest.json).")
print()
print("the truncation baseline saturates near Rho 0.87: its 2-bit scalar")
print("quantization caps the fidelity of even the subbands it keeps. the")
print("learned code spreads its bits over all subbands, and the short")
print("quantization-aware fine-tune recovers most of the float Rho even")
print("at the 64-bit budget.")
