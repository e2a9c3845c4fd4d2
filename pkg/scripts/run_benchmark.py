#!/usr/bin/env python3
"""End-to-end planted-gap benchmark: generate, diagnose, train, align, evaluate.

Drives the CLI commands in sequence, splits the generated corpus into
estimation and held-out halves, runs every transform plus the full
alignment pipeline, and prints the combined metric table.
"""

import argparse
import json
import sys
from pathlib import Path

from anisoalign import store
from anisoalign.cli import main as cli_main

TRANSFORMS = ["identity", "centroid", "moment", "perm", "alpha", "c3", "realign"]
METHOD_NAMES = {
    "identity": "id",
    "centroid": "mu",
    "moment": "sigma",
    "perm": "perm",
    "alpha": "alpha",
    "c3": "c3",
    "realign": "realign",
}


def run_cli(args):
    code = cli_main(args)
    if code != 0:
        raise SystemExit(f"command {' '.join(args)} failed with exit code {code}")


def write_config(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--prior-steps", type=int, default=20000)
    ap.add_argument("--refine-steps", type=int, default=1500)
    ap.add_argument("--mixing", default="fixed-identity")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dir = out / "configs"
    cfg_dir.mkdir(exist_ok=True)

    gen_cfg = cfg_dir / "gen.json"
    write_config(gen_cfg, {"n": args.n, "seed": args.seed})
    run_cli(["gen", "--config", str(gen_cfg), "--out", str(out / "gen")])

    # estimation / held-out split, saved as separate EMBD files for the CLI
    x = store.load(out / "gen" / "x.embd", modality="target")
    y = store.load(out / "gen" / "y.embd", modality="source")
    pairs = store.PairedSet(x=x, y=y)
    est, held = store.split(pairs, store.SplitSpec(0.5, args.seed + 1))
    data = out / "data"
    data.mkdir(exist_ok=True)
    paths = {}
    for name, eset in [
        ("x_est", est.x),
        ("y_est", est.y),
        ("x_eval", held.x),
        ("y_eval", held.y),
    ]:
        paths[name] = data / f"{name}.embd"
        store.save(eset, paths[name])

    diag_cfg = cfg_dir / "diagnose.json"
    write_config(
        diag_cfg,
        {"x": str(out / "gen" / "x.embd"), "y": str(out / "gen" / "y.embd")},
    )
    run_cli(["diagnose", "--config", str(diag_cfg), "--out", str(out / "diagnose")])

    prior_cfg = cfg_dir / "prior.json"
    write_config(
        prior_cfg,
        {
            "x_est": str(paths["x_est"]),
            "y_est": str(paths["y_est"]),
            "steps": args.prior_steps,
            "mixing": args.mixing,
            "seed": args.seed,
        },
    )
    run_cli(["train-prior", "--config", str(prior_cfg), "--out", str(out / "prior")])

    align_cfg = cfg_dir / "align.json"
    write_config(
        align_cfg,
        {
            "y_input": str(paths["y_eval"]),
            "x_est": str(paths["x_est"]),
            "y_est": str(paths["y_est"]),
            "frame": str(out / "prior" / "frame.bin"),
            "prior": str(out / "prior" / "prior.bin"),
            "steps": args.refine_steps,
            "seed": args.seed,
        },
    )
    run_cli(["align", "--config", str(align_cfg), "--out", str(out / "align")])

    z_paths = {"anisoalign": out / "align" / "z.embd"}
    for kind in TRANSFORMS:
        cfg = {
            "kind": kind,
            "input": str(paths["y_eval"]),
            "x_est": str(paths["x_est"]),
            "y_est": str(paths["y_est"]),
            "seed": args.seed,
        }
        if kind == "perm":
            cfg["x_est"] = str(paths["x_eval"])
        if kind == "alpha":
            cfg["x_input"] = str(paths["x_eval"])
            cfg["alpha"] = 1.0
            cfg["rank"] = 8
        tdir = out / f"transform_{kind}"
        tcfg = cfg_dir / f"transform_{kind}.json"
        write_config(tcfg, cfg)
        run_cli(["transform", "--config", str(tcfg), "--out", str(tdir)])
        z_paths[METHOD_NAMES[kind]] = tdir / "z.embd"

    reports = []
    for method, z_path in z_paths.items():
        ecfg = cfg_dir / f"eval_{method}.json"
        write_config(
            ecfg,
            {
                "x_eval": str(paths["x_eval"]),
                "y_eval": str(paths["y_eval"]),
                "z": str(z_path),
                "method": method,
                "seed": args.seed,
            },
        )
        edir = out / f"eval_{method}"
        run_cli(["eval", "--config", str(ecfg), "--out", str(edir)])
        reports.append(str(edir / "metrics.json"))

    rcfg = cfg_dir / "report.json"
    write_config(rcfg, {"reports": reports})
    run_cli(["report", "--config", str(rcfg), "--out", str(out / "report")])
    print((out / "report" / "report.csv").read_text())


if __name__ == "__main__":
    sys.exit(main())
