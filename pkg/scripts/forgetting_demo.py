#!/usr/bin/env python3
"""Three-site stream where sequential fine-tuning erases the first site.

The synthetic cohort gives each site an outcome signal along a different
direction of one shared two-dimensional feature subspace (0, 90 and 180
degrees apart), with site-specific static offsets strong enough that joint
training can still separate the sites. Training site by site then overwrites
the weights the first site relies on; rehearsal or joint training does not.

Prints a retention table for the first task in stream order and leaves the
full per-epoch records under --out for ``seqcl report``.
"""

import argparse
import json
import pathlib

import numpy as np

from seqcl import harness


def build_profile(n_patients):
    dt, ds = 8, 2
    u = np.ones(dt) / np.sqrt(dt)
    v = np.zeros(dt)
    v[: dt // 2] = 1.0
    v[dt // 2 :] = -1.0
    v /= np.linalg.norm(v)
    domains = []
    for j, ang in enumerate((0.0, 90.0, 180.0)):
        rad = np.deg2rad(ang)
        direction = np.cos(rad) * u + np.sin(rad) * v
        orth = np.zeros(dt)
        orth[2 * j] = 1.0
        orth[2 * j + 1] = -1.0
        orth /= np.linalg.norm(orth)
        pos = 2.0 * np.pi * j / 3.0
        static = 4.0 * np.array([np.cos(pos), np.sin(pos)])
        domains.append(
            {
                "name": f"site{j:02d}",
                "mean_offset": list(2.0 * orth) + list(static),
                "prevalence": 0.25,
                "label_direction": list(direction),
            }
        )
    return {
        "n_patients": n_patients,
        "n_timevarying": dt,
        "n_static": ds,
        "seq_len": 24,
        "label_amplitude": 2.8,
        "domains": {"site": domains},
    }


def first_task_trajectory(outs, epochs):
    """Across-run mean test balanced accuracy of the first task, plus the
    per-run peak-to-final drops."""
    drops = []
    for out in outs:
        peak = max(
            r["metrics"]["balanced_accuracy"]
            for r in out.records
            if r["trained_task"] == 0 and r["eval_task"] == 0
            and r["split"] == "test"
        )
        final = next(
            r["metrics"]["balanced_accuracy"]
            for r in out.records
            if r["trained_task"] == 2 and r["eval_task"] == 0
            and r["split"] == "test" and r["epoch"] == epochs - 1
        )
        drops.append((peak, final))
    return drops


def main():
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--out", default="results/forgetting_demo",
                        help="directory for run records and the cohort profile")
    parser.add_argument("--patients", type=int, default=4800)
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--master-seed", type=int, default=0)
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile_path = out / "profile.json"
    profile_path.write_text(json.dumps(build_profile(args.patients), indent=2))

    print(f"cohort profile written to {profile_path}")
    print(f"{'strategy':12s} {'peak':>6s} {'final':>6s} {'drop':>7s}   per-run drops")
    for strategy in ("naive", "replay", "cumulative"):
        config = harness.config_from_dict({
            "data": {"profile": str(profile_path), "seed": 11},
            "domain_key": "site",
            "architecture": {"kind": "mlp", "n_layers": 1, "hidden_dim": 64,
                             "nonlinearity": "tanh"},
            "strategy": strategy,
            "output_dir": str(out / strategy),
            "epochs_per_task": args.epochs,
            "learning_rate": 0.1,
            "n_runs": args.runs,
            "master_seed": args.master_seed,
        })
        outs = harness.run_experiment(config)
        pairs = first_task_trajectory(outs, args.epochs)
        peak = float(np.mean([p for p, _ in pairs]))
        final = float(np.mean([f for _, f in pairs]))
        per_run = " ".join(f"{p - f:+.3f}" for p, f in pairs)
        print(f"{strategy:12s} {peak:6.3f} {final:6.3f} {peak - final:+7.3f}   {per_run}")
    print(f"\nfull records under {out}/<strategy>/; summarize with: "
          f"seqcl report {out}/<strategy>")


if __name__ == "__main__":
    main()
