"""Operator-facing pipeline with reproducible run manifests.

Subcommands: gen | diagnose | transform | train-prior | align | eval | report.
Each command resolves its parameters as flag > config file > default,
rejects unknown config keys, and writes a manifest recording the fully
resolved configuration plus the sha256 of every input and output, which is
sufficient to reproduce that run bit for bit.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import aligner, diagnostics, evalsuite, phase_prior, synthetic, transforms
from . import frame as frame_mod
from . import store
from .errors import (
    AnisoAlignError,
    DependencyMissing,
    InvalidConfig,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

_BENCHMARK_GEN = {
    "n": 20000,
    "d": 256,
    "shared_dim": 40,
    "shared_total": 0.42,
    "shared_decay": 0.99,
    "mean_scale": 1.15,
    "latent_scale_sigma": 0.18,
    "residual_k": 4,
    "residual_e1": 0.005524,
    "residual_decay": 0.75,
    "centroid_offset": 0.4,
    "iso_noise": 0.002,
    "x_noise": 0.002,
    "v_bands": [[0.003, 0.024, 1.0, 104], [0.010, 0.0025, 9.0, 52]],
    "mc_samples": 50000,
    "seed": 0,
}

SCHEMAS = {
    "gen": dict(_BENCHMARK_GEN),
    "diagnose": {
        "x": "",
        "y": "",
        "frame": "",
        "q_grid": [],
        "seed": 0,
    },
    "transform": {
        "kind": "identity",
        "x_est": "",
        "y_est": "",
        "input": "",
        "x_input": "",
        "alpha": 1.0,
        "rank": 8,
        "noise_sigma": 0.04,
        "seed": 0,
    },
    "train-prior": {
        "x_est": "",
        "y_est": "",
        "r": 64,
        "lambda_reg": 1e-6,
        "eps_polar": 1e-12,
        "sigma_min": 0.05,
        "sigma_max": 1.5,
        "tau": 0.1,
        "num_levels": 0,
        "top_p": 3,
        "hidden": 0,
        "steps": 20000,
        "batch": 256,
        "lr": 1e-3,
        "val_fraction": 0.05,
        "mixing": "fixed-identity",
        "seed": 0,
    },
    "align": {
        "y_input": "",
        "x_est": "",
        "y_est": "",
        "frame": "",
        "prior": "",
        "alpha_theta": 0.3,
        "alpha_rho": 0.2,
        "alpha_v": 0.05,
        "beta": 0.5,
        "steps": 800,
        "batch": 128,
        "lr": 1e-5,
        "hidden": 0,
        "seed": 0,
    },
    "eval": {
        "x_eval": "",
        "y_eval": "",
        "z": "",
        "method": "",
        "k": 20,
        "psi_pairs": 100000,
        "permutations": 20,
        "seed": 0,
    },
    "report": {
        "reports": [],
        "seed": 0,
    },
}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_config(command, config_path, overrides):
    schema = SCHEMAS[command]
    resolved = dict(schema)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise InvalidConfig(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise InvalidConfig("config root must be a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise InvalidConfig(f"unknown config keys for {command}: {unknown}")
        resolved.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_manifest(out_dir, command, config, threads, inputs, outputs):
    manifest = {
        "command": command,
        "config": config,
        "threads": threads,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "outputs": {
            name: {"path": str(p), "sha256": _sha256(p)} for name, p in outputs.items()
        },
    }
    _write_text(
        Path(out_dir) / "manifest.json",
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _require(config, keys, command):
    for key in keys:
        if not config[key]:
            raise InvalidConfig(f"{command} requires config key {key!r}")


def _load_set(path, modality=None):
    try:
        return store.load(path, modality=modality)
    except FileNotFoundError:
        raise AnisoAlignError(f"input file not found: {path}")


def cmd_gen(config, out_dir, threads):
    spec = synthetic.PlantSpec(
        n=int(config["n"]),
        d=int(config["d"]),
        shared_dim=int(config["shared_dim"]),
        shared_spectrum=synthetic.geometric_spectrum(
            int(config["shared_dim"]), config["shared_total"], config["shared_decay"]
        ),
        residual_energies=tuple(
            config["residual_e1"] * config["residual_decay"] ** j
            for j in range(int(config["residual_k"]))
        ),
        centroid_offset=config["centroid_offset"],
        iso_noise=config["iso_noise"],
        x_noise=config["x_noise"],
        mean_scale=config["mean_scale"],
        latent_scale_sigma=config["latent_scale_sigma"],
        v_bands=tuple(tuple(band) for band in config["v_bands"]),
        seed=int(config["seed"]),
    )
    pair, truth = synthetic.generate(spec, mc_samples=int(config["mc_samples"]))
    out = Path(out_dir)
    x_path = out / "x.embd"
    y_path = out / "y.embd"
    store.save(pair.x, x_path)
    store.save(pair.y, y_path)
    truth_doc = dict(truth.scalars())
    truth_doc["residual_spectrum_raw"] = truth.residual_spectrum_raw.tolist()
    truth_doc["x"] = store.manifest(pair.x, x_path)
    truth_doc["y"] = store.manifest(pair.y, y_path)
    truth_path = out / "truth.json"
    _write_text(truth_path, json.dumps(truth_doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out_dir,
        "gen",
        config,
        threads,
        {},
        {"x": x_path, "y": y_path, "truth": truth_path},
    )


def cmd_diagnose(config, out_dir, threads):
    _require(config, ["x", "y"], "diagnose")
    x = _load_set(config["x"], "target")
    y = _load_set(config["y"], "source")
    pairs = store.PairedSet(x=x, y=y)
    basis = None
    if config["frame"]:
        basis = frame_mod.load_frame(config["frame"]).basis
    q_grid = [int(q) for q in config["q_grid"]] or None
    report = diagnostics.build_report(pairs, q_grid=q_grid, frame_basis=basis)
    out = Path(out_dir)
    outputs = {}
    _write_text(out / "report.json", diagnostics.report_to_json(report))
    outputs["report"] = out / "report.json"
    _write_text(
        out / "overlap.csv",
        diagnostics.curves_to_csv(report.overlap_curve, ["q", "o_q", "baseline"]),
    )
    outputs["overlap"] = out / "overlap.csv"
    _write_text(
        out / "energy.csv",
        diagnostics.curves_to_csv(report.energy_curve, ["k", "e_k", "baseline"]),
    )
    outputs["energy"] = out / "energy.csv"
    from .numerics import covariance, sym_eig

    lam_x = sym_eig(covariance(x.data)).values
    lam_y = sym_eig(covariance(y.data)).values
    lam_r = np.array(report.residual_spectrum)
    if lam_r.size < lam_x.size:
        lam_r = np.pad(lam_r, (0, lam_x.size - lam_r.size))
    rows = [
        (rank + 1, lam_x[rank], lam_y[rank], lam_r[rank])
        for rank in range(lam_x.size)
    ]
    _write_text(
        out / "spectra.csv",
        diagnostics.curves_to_csv(rows, ["rank", "lambda_x", "lambda_y", "lambda_r_norm"]),
    )
    outputs["spectra"] = out / "spectra.csv"
    inputs = {"x": config["x"], "y": config["y"]}
    if config["frame"]:
        inputs["frame"] = config["frame"]
    _write_manifest(out_dir, "diagnose", config, threads, inputs, outputs)


def cmd_transform(config, out_dir, threads):
    _require(config, ["kind", "input"], "transform")
    kind = config["kind"]
    spec = transforms.TransformSpec(
        kind=kind,
        alpha=config["alpha"] if kind == "alpha" else None,
        rank=int(config["rank"]) if kind == "alpha" else None,
        noise_sigma=config["noise_sigma"] if kind == "c3" else None,
        seed=int(config["seed"]) if kind in ("perm", "c3") else None,
    )
    y_in = _load_set(config["input"], "source")
    inputs = {"input": config["input"]}
    stats = None
    x_est = None
    pairs = None
    if kind in ("centroid", "moment", "c3", "realign"):
        _require(config, ["x_est", "y_est"], f"transform kind {kind}")
        xe = _load_set(config["x_est"], "target")
        ye = _load_set(config["y_est"], "source")
        inputs["x_est"] = config["x_est"]
        inputs["y_est"] = config["y_est"]
        from .numerics import covariance

        sx = covariance(xe.data)
        sy = covariance(ye.data)
        stats = {
            "mu_target": xe.data.mean(axis=0),
            "mu_source": ye.data.mean(axis=0),
            "sigma_target": sx,
            "sigma_source": sy,
            "trace_target": float(np.trace(sx)),
            "trace_source": float(np.trace(sy)),
        }
    if kind == "perm":
        _require(config, ["x_est"], "transform kind perm")
        x_est = _load_set(config["x_est"], "target")
        inputs["x_est"] = config["x_est"]
    if kind == "alpha":
        _require(config, ["x_input"], "transform kind alpha")
        x_in = _load_set(config["x_input"], "target")
        inputs["x_input"] = config["x_input"]
        pairs = store.PairedSet(x=x_in, y=y_in)
    z = transforms.apply_spec(spec, y_in, x_target=x_est, pairs=pairs, stats=stats)
    out = Path(out_dir)
    z_path = out / "z.embd"
    store.save(z, z_path)
    _write_manifest(out_dir, "transform", config, threads, inputs, {"z": z_path})


def cmd_train_prior(config, out_dir, threads, mixing_flag=None):
    _require(config, ["x_est", "y_est"], "train-prior")
    if mixing_flag:
        config = dict(config)
        config["mixing"] = mixing_flag
    if config["mixing"] not in ("fixed-identity", "learned"):
        raise InvalidConfig(f"unknown mixing mode {config['mixing']!r}")
    x_est = _load_set(config["x_est"], "target")
    y_est = _load_set(config["y_est"], "source")
    fitted = frame_mod.fit_frame(
        x_est,
        y_est,
        r=int(config["r"]),
        lambda_reg=config["lambda_reg"],
        eps_polar=config["eps_polar"],
    )
    polar = frame_mod.to_polar(fitted, x_est.data)
    schedule = phase_prior.NoiseSchedule(
        sigma_min=config["sigma_min"],
        sigma_max=config["sigma_max"],
        tau=config["tau"],
        num_levels=int(config["num_levels"]) or None,
    )
    train_cfg = phase_prior.PriorTrainConfig(
        steps=int(config["steps"]),
        batch=int(config["batch"]),
        lr=config["lr"],
        hidden=int(config["hidden"]) or None,
        top_p=int(config["top_p"]),
        val_fraction=config["val_fraction"],
        mixing=config["mixing"],
        seed=int(config["seed"]),
    )
    prior, final_frame, history = phase_prior.train_prior(
        polar.rho, polar.theta, fitted, schedule, train_cfg
    )
    out = Path(out_dir)
    frame_path = out / "frame.bin"
    prior_path = out / "prior.bin"
    frame_mod.save_frame(final_frame, frame_path)
    phase_prior.save_prior(prior, prior_path)
    _write_text(
        out / "history.json", json.dumps(history, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(
        out_dir,
        "train-prior",
        config,
        threads,
        {"x_est": config["x_est"], "y_est": config["y_est"]},
        {
            "frame": frame_path,
            "frame_scalars": Path(str(frame_path) + ".json"),
            "prior": prior_path,
            "history": out / "history.json",
        },
    )


def cmd_align(config, out_dir, threads):
    _require(config, ["y_input", "x_est", "y_est", "frame", "prior"], "align")
    for key in ("frame", "prior"):
        if not os.path.exists(config[key]):
            raise DependencyMissing(
                "train-prior",
                f"missing {key} artifact from stage 'train-prior': {config[key]}",
            )
    fr = frame_mod.load_frame(config["frame"])
    prior = phase_prior.load_prior(config["prior"])
    x_est = _load_set(config["x_est"], "target")
    y_est = _load_set(config["y_est"], "source")
    y_in = _load_set(config["y_input"], "source")
    transfer = aligner.fit_radial_transfer(fr, x_est, y_est)
    bounds = aligner.Bounds(
        alpha_theta=config["alpha_theta"],
        alpha_rho=config["alpha_rho"],
        alpha_v=config["alpha_v"],
    )
    states = aligner.global_init(y_est.data, fr, transfer)
    train_cfg = aligner.RefineTrainConfig(
        steps=int(config["steps"]),
        batch=int(config["batch"]),
        lr=config["lr"],
        hidden=int(config["hidden"]) or None,
        beta=config["beta"],
        seed=int(config["seed"]),
    )
    refiner, history = aligner.train_refiner(states, fr, prior, bounds, train_cfg)
    artifacts = aligner.AlignArtifacts(
        frame=fr,
        prior=prior,
        radial_transfer=transfer,
        refiner=refiner,
        bounds=bounds,
    )
    z = aligner.align_corpus(y_in, artifacts)
    out = Path(out_dir)
    z_path = out / "z.embd"
    store.save(z, z_path)
    refiner_path = out / "refiner.bin"
    aligner.save_refiner(refiner, bounds, refiner_path)
    _write_text(
        out / "history.json", json.dumps(history, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(
        out_dir,
        "align",
        config,
        threads,
        {
            "y_input": config["y_input"],
            "x_est": config["x_est"],
            "y_est": config["y_est"],
            "frame": config["frame"],
            "prior": config["prior"],
        },
        {"z": z_path, "refiner": refiner_path, "history": out / "history.json"},
    )


def cmd_eval(config, out_dir, threads):
    _require(config, ["x_eval", "y_eval", "z"], "eval")
    # everything is compared in the normalized representation space
    x = store.l2_normalize(_load_set(config["x_eval"], "target"))
    y = store.l2_normalize(_load_set(config["y_eval"], "source"))
    z = store.l2_normalize(_load_set(config["z"], "substitute"))
    report = evalsuite.build_metric_report(
        y.data,
        z.data,
        x.data,
        method=config["method"],
        k=int(config["k"]),
        pair_count=int(config["psi_pairs"]),
        permutations=int(config["permutations"]),
        seed=int(config["seed"]),
    )
    out = Path(out_dir)
    _write_text(out / "metrics.json", evalsuite.metric_report_to_json(report))
    _write_text(
        out / "metrics.csv",
        ",".join(evalsuite.CSV_HEADER)
        + "\n"
        + evalsuite.metric_report_csv_row(report)
        + "\n",
    )
    spec_rows = [(i + 1, v) for i, v in enumerate(report.residual_spectrum_t)]
    _write_text(
        out / "residual_spectrum.csv",
        diagnostics.curves_to_csv(spec_rows, ["rank", "lambda_norm"]),
    )
    _write_manifest(
        out_dir,
        "eval",
        config,
        threads,
        {"x_eval": config["x_eval"], "y_eval": config["y_eval"], "z": config["z"]},
        {
            "metrics": out / "metrics.json",
            "metrics_csv": out / "metrics.csv",
            "residual_spectrum": out / "residual_spectrum.csv",
        },
    )


def cmd_report(config, out_dir, threads):
    if not config["reports"]:
        raise InvalidConfig("report requires a nonempty 'reports' list")
    rows = []
    inputs = {}
    for i, path in enumerate(config["reports"]):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise AnisoAlignError(f"metric report not found: {path}")
        rows.append(
            [str(doc.get("method", f"method{i}"))]
            + [repr(float(doc[name])) for name in evalsuite.CSV_HEADER[1:]]
        )
        inputs[f"report{i}"] = path
    text = ",".join(evalsuite.CSV_HEADER) + "\n"
    text += "\n".join(",".join(row) for row in rows) + "\n"
    out = Path(out_dir)
    _write_text(out / "report.csv", text)
    _write_manifest(out_dir, "report", config, threads, inputs, {"report": out / "report.csv"})


_HANDLERS = {
    "gen": cmd_gen,
    "diagnose": cmd_diagnose,
    "transform": cmd_transform,
    "train-prior": cmd_train_prior,
    "align": cmd_align,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anisoalign",
        description="Modality-gap diagnostics and anisotropic alignment pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="cap worker threads (env ANISO_THREADS as fallback)",
        )
        if name == "train-prior":
            p.add_argument(
                "--mixing",
                choices=["fixed-identity", "learned"],
                default=None,
                help="basis mixing mode",
            )
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("ANISO_THREADS", "1") or "1")
    threads = max(1, threads)
    try:
        config = _resolve_config(args.command, args.config, {"seed": args.seed})
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "train-prior":
            _HANDLERS[args.command](config, out_dir, threads, mixing_flag=args.mixing)
        else:
            _HANDLERS[args.command](config, out_dir, threads)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (AnisoAlignError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
