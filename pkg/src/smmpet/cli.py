"""Command-line front end: simulate, partition, fit, select-g, evaluate, export.

Every command writes a JSON manifest next to its outputs recording the effective
settings, inputs, outputs and wall-clock time.  Exit codes: 0 success, 2 invalid
input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np

from . import evalmetrics as em
from .errors import InvalidArgumentError, NumericalError
from .kinetics import FrameModel, FrameScheme, InputFunction
from .phantom import (PHANTOM_NOISE_LEVEL, DynamicImage, NoiseKind, NoiseModel, PhantomSpec, add_noise,
                      default_phantom, read_truth_csv, render_noise_free, write_dpet)
from .potts import MCSettings, NeighborGraph, PartitionTable, cached_partition, estimate_partition
from .scf import FitConfig, FitStatus, fit_image, image_frame_weights
from .skms import SkmsConfig, skms_fit, write_labels_csv
from .smm import (PHANTOM_SCALE_MULTIPLIER, MCMCConfig, Priors, ProposalScales, SMMContext,
                  run_mcmc, select_components, write_beta_trace_csv, write_bic_csv,
                  write_samples_csv)

MAP_HEADER = "x,y,K1,k2,wrss,status"


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value"):
        return obj.value
    return obj


def write_manifest(path, args, command, config, inputs, outputs, started, extra=None):
    doc = {
        "command": command,
        "argv": list(getattr(args, "argv", [])),
        "tool_version": _version(),
        "seed": config.get("seed"),
        "config": _jsonable(config),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": [str(o) for o in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        doc.update(_jsonable(extra))
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidArgumentError(f"--config: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"--config: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InvalidArgumentError("--config: top level must be an object")
    return doc


def _pick(cli_value, cfg, key, default):
    if cli_value is not None:
        return cli_value
    return cfg.get(key, default)


def _load_scheme(args):
    frames = FrameScheme.from_csv(args.frames)
    inp = InputFunction.from_csv(args.input)
    return frames, inp


def _load_image(path, frames):
    img = DynamicImage.from_dpet(path)
    if img.n_frames != frames.n_frames:
        raise InvalidArgumentError(f"image has {img.n_frames} frames but the frame file lists {frames.n_frames}")
    return img


def write_map_csv(path, nx, K1, k2, wrss, status):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(MAP_HEADER + "\n")
        for i in range(len(K1)):
            fh.write(f"{i % nx},{i // nx},{float(K1[i])!r},{float(k2[i])!r},{float(wrss[i])!r},{status[i]}\n")


def read_map_csv(path, nx=None, ny=None):
    """Return (nx, ny, columns dict) from a parametric-map CSV."""
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != MAP_HEADER:
            raise InvalidArgumentError(f"{path}: expected header {MAP_HEADER}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    xs = np.array([int(r[0]) for r in rows])
    ys = np.array([int(r[1]) for r in rows])
    nx = nx or int(xs.max()) + 1
    ny = ny or int(ys.max()) + 1
    if len(rows) != nx * ny:
        raise InvalidArgumentError(f"{path}: {len(rows)} rows for a {nx}x{ny} map")
    idx = ys * nx + xs
    out = {"K1": np.empty(nx * ny), "k2": np.empty(nx * ny), "wrss": np.empty(nx * ny)}
    status = [""] * (nx * ny)
    for j, r in enumerate(rows):
        out["K1"][idx[j]], out["k2"][idx[j]], out["wrss"][idx[j]] = float(r[2]), float(r[3]), float(r[4])
        status[idx[j]] = r[5]
    out["status"] = status
    return nx, ny, out


def _param_dpet(out_dir, nx, ny, **maps):
    paths = []
    for name, values in maps.items():
        p = out_dir / f"{name}.dpet"
        write_dpet(p, np.asarray(values, dtype=float)[:, None], nx, ny)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    started = time.perf_counter()
    frames = FrameScheme.from_csv(args.frames) if args.frames else None
    inp = InputFunction.from_csv(args.input) if args.input else None
    if args.spec == "default":
        spec = default_phantom(frames, inp)
    else:
        if not Path(args.spec).is_file():
            raise InvalidArgumentError(f"--spec: file {args.spec} not found")
        try:
            spec = PhantomSpec.from_json(Path(args.spec), frames, inp)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"--spec: invalid JSON ({exc})") from None
    if args.replicates < 1:
        raise InvalidArgumentError("--replicates must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clean = render_noise_free(spec)
    outputs = []
    seeds = np.random.SeedSequence(args.seed).generate_state(args.replicates, dtype=np.uint64)
    for r in range(args.replicates):
        img = add_noise(clean, NoiseModel(NoiseKind(args.noise), args.level, int(seeds[r])), spec.frames)
        p = out / f"rep_{r:03d}.dpet"
        img.to_dpet(p)
        outputs.append(p)
    clean.write_truth_csv(out / "truth.csv")
    spec.frames.to_csv(out / "frames.csv")
    spec.input.to_csv(out / "input.csv")
    spec.to_json(out / "spec.json")
    outputs += [out / "truth.csv", out / "frames.csv", out / "input.csv", out / "spec.json"]
    cfg = {"noise": args.noise, "level": args.level, "seed": args.seed, "replicates": args.replicates,
           "replicate_seeds": [int(s) for s in seeds]}
    write_manifest(out / "manifest.json", args, "simulate", cfg,
                   {"spec": args.spec, "frames": args.frames, "input": args.input}, outputs, started)
    print(f"wrote {args.replicates} image(s) to {out}")


def cmd_partition(args):
    started = time.perf_counter()
    graph = NeighborGraph(args.nx, args.ny)
    mc = MCSettings(args.burnin, args.sweeps, args.seed)
    table = estimate_partition(args.g, graph, args.beta_max, args.step, mc, workers=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    cfg = {"nx": args.nx, "ny": args.ny, "G": args.g, "beta_max": args.beta_max, "step": args.step,
           "burnin": args.burnin, "sweeps": args.sweeps, "seed": args.seed}
    write_manifest(Path(str(out) + ".manifest.json"), args, "partition", cfg, {}, [out, Path(str(out) + ".json")],
                   started)
    print(f"log C(beta_max) = {table.log_c[-1]:.6f}; table written to {out}")


def _smm_settings(args, cfg):
    priors = Priors(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.get("priors", {}).items()})
    scales = ProposalScales(**cfg.get("scales", {}))
    mult = _pick(args.scale_multiplier, cfg, "scale_multiplier", PHANTOM_SCALE_MULTIPLIER)
    return priors, scales.scaled(mult), mult


def cmd_fit(args):
    started = time.perf_counter()
    cfg = _load_config(args.config)
    frames, inp = _load_scheme(args)
    img = _load_image(args.image, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"image": args.image, "frames": args.frames, "input": args.input, "config": args.config}
    extra = {}
    if args.method == "scf":
        weights = _pick(args.weights, cfg, "weights", "counts")
        if weights not in ("counts", "unit"):
            raise InvalidArgumentError("weights: expected 'counts' or 'unit'")
        fc = FitConfig(weights=image_frame_weights(img, frames) if weights == "counts" else None,
                       max_iter=cfg.get("max_iter", 200))
        fm = fit_image(img, inp, frames, fc, workers=args.threads)
        status = [s.value for s in fm.status]
        write_map_csv(out / "map.csv", img.nx, fm.K1, fm.k2, fm.wrss, status)
        outputs = [out / "map.csv"] + _param_dpet(out, img.nx, img.ny, K1=fm.K1, k2=fm.k2)
        settings = {"method": "scf", "weights": weights, "max_iter": fc.max_iter, "seed": None}
        extra["failed_voxels"] = sum(s == FitStatus.FAILED for s in fm.status)
    elif args.method == "skms":
        sc = SkmsConfig(G=_pick(args.g, cfg, "G", 17), beta=_pick(args.beta, cfg, "beta", 0.2),
                        max_iter=cfg.get("max_iter", 100), conv_tol=cfg.get("conv_tol", 1e-6),
                        seed=_pick(args.seed, cfg, "seed", 0))
        res = skms_fit(img, inp, frames, sc)
        K1, k2 = res.voxel_params()
        model = FrameModel(frames, inp)
        curves = np.vstack([model.tissue(p.K1, p.k2) for p in res.cluster_params])
        wrss = np.sum((img.data - curves[res.labels - 1]) ** 2, axis=1)
        status = ["CONVERGED" if res.converged else "MAX_ITER"] * img.n_voxels
        write_map_csv(out / "map.csv", img.nx, K1, k2, wrss, status)
        write_labels_csv(out / "labels.csv", res.labels, img.nx, img.ny)
        outputs = [out / "map.csv", out / "labels.csv"] + _param_dpet(out, img.nx, img.ny, K1=K1, k2=k2)
        settings = dict(dataclasses.asdict(sc), method="skms")
        extra.update(iterations=res.iterations, converged=res.converged, reseeded=res.reseeded)
    else:
        if not args.table:
            raise InvalidArgumentError("--table: smm needs a partition table (create one with 'smmpet partition')")
        table = PartitionTable.load(args.table)
        priors, scales, mult = _smm_settings(args, cfg)
        mode = _pick(args.mode, cfg, "mode", "full")
        G = _pick(args.g, cfg, "G", 3)
        default_iters = 6000 if mode == "map" else 10000
        mc = MCMCConfig(G=G, iterations=_pick(args.iterations, cfg, "iterations", default_iters),
                        burn_in=0 if mode == "map" else _pick(args.burn_in, cfg, "burn_in", 4000),
                        thin=cfg.get("thin", 10), seed=_pick(args.seed, cfg, "seed", 0), mode=mode)
        graph = NeighborGraph(img.nx, img.ny)
        if not table.matches(img.nx, img.ny, G):
            raise InvalidArgumentError(f"--table: built for {table.nx}x{table.ny}, G={table.G}; "
                                       f"image is {img.nx}x{img.ny} and G={G}")
        model = FrameModel(frames, inp)
        ctx = SMMContext(img.data, model, graph, table, priors, scales)
        summ = run_mcmc(ctx, mc)
        st = summ.map_state
        K1, k2 = st.voxel_params()
        means = st.means(model)
        wrss = np.sum((img.data - means[st.z - 1]) ** 2 / st.sigma2, axis=1)
        status = ["NOISE" if z == G else "KINETIC" for z in st.z]
        write_map_csv(out / "map.csv", img.nx, K1, k2, wrss, status)
        write_beta_trace_csv(out / "beta.csv", summ.beta_trace)
        outputs = [out / "map.csv", out / "beta.csv"] + _param_dpet(out, img.nx, img.ny, K1=K1, k2=k2)
        if summ.samples is not None:
            write_samples_csv(out / "samples.csv", summ.samples)
            write_dpet(out / "membership.dpet", summ.membership, img.nx, img.ny)
            outputs += [out / "samples.csv", out / "membership.dpet"]
            extra["posterior"] = {"K1_mean": summ.k1_mean, "K1_interval95": summ.k1_interval,
                                  "k2_mean": summ.k2_mean, "k2_interval95": summ.k2_interval}
            (out / "summary.json").write_text(json.dumps(_jsonable(extra["posterior"]), indent=1) + "\n")
            outputs.append(out / "summary.json")
        settings = {"method": "smm", "priors": priors, "scales": scales, "scale_multiplier": mult,
                    "mcmc": mc, "seed": mc.seed, "table": str(args.table)}
        extra.update(acceptance=summ.acceptance, map_log_posterior=summ.map_log_posterior,
                     map_iteration=summ.map_iteration,
                     map_state={"K1": st.K1, "k2": st.k2, "beta": st.beta, "sigma2": st.sigma2,
                                "noise_mean": st.noise_mean})
    write_manifest(out / "manifest.json", args, f"fit {args.method}", settings, inputs, outputs, started, extra)
    print(f"{args.method}: maps written to {out}")


def cmd_select_g(args):
    started = time.perf_counter()
    cfg = _load_config(args.config)
    frames, inp = _load_scheme(args)
    img = _load_image(args.image, frames)
    if args.gmin > args.gmax:
        raise InvalidArgumentError("--gmin must not exceed --gmax")
    graph = NeighborGraph(img.nx, img.ny)
    priors, scales, mult = _smm_settings(args, cfg)
    mc = MCSettings(**cfg.get("partition_mc", {}))
    iterations = _pick(args.iterations, cfg, "iterations", 6000)
    seed = _pick(args.seed, cfg, "seed", 0)
    best, rows = select_components(
        img, FrameModel(frames, inp), range(args.gmin, args.gmax + 1),
        lambda G: cached_partition(G, graph, args.table_dir, mc=mc, workers=args.threads),
        priors, scales, iterations=iterations, seed=seed, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bic_csv(out / "bic.csv", rows)
    ll = [r.loglik for r in rows]
    if any(b < a for a, b in zip(ll, ll[1:])):
        warnings.warn("maximised log-likelihood is not monotone in G; chains may need more iterations")
        print("warning: log-likelihood is not monotone in G", file=sys.stderr)
    settings = {"gmin": args.gmin, "gmax": args.gmax, "iterations": iterations, "seed": seed,
                "priors": priors, "scales": scales, "scale_multiplier": mult, "partition_mc": mc,
                "table_dir": args.table_dir}
    write_manifest(out / "manifest.json", args, "select-g", settings,
                   {"image": args.image, "frames": args.frames, "input": args.input, "config": args.config},
                   [out / "bic.csv"], started, {"chosen_G": best})
    print(f"chosen G = {best}")


def cmd_evaluate(args):
    started = time.perf_counter()
    maps = []
    for m in args.maps:
        # a directory stands for every map.csv beneath it, in sorted order
        maps += sorted(str(p) for p in Path(m).rglob("map.csv")) if Path(m).is_dir() else [m]
    if not maps:
        raise InvalidArgumentError("maps: no parametric-map CSVs found")
    args.maps = maps
    first_nx, first_ny, _ = read_map_csv(args.maps[0])
    t_k1, t_k2, reg, noise_id = read_truth_csv(args.truth, first_nx, first_ny)
    noise = reg == noise_id if noise_id is not None else np.zeros(reg.size, dtype=bool)
    est = {"K1": [], "k2": []}
    for p in args.maps:
        _, _, cols = read_map_csv(p, first_nx, first_ny)
        est["K1"].append(cols["K1"])
        est["k2"].append(cols["k2"])
    reports = {}
    for param, truth in (("K1", t_k1), ("k2", t_k2)):
        B = np.array([em.voxel_bias(e, truth, noise) for e in est[param]])
        reports[param] = em.aggregate_bias(B, reg)
    tcls = em.truth_classes(t_k1, noise)
    conf = em.misclassification_table(np.concatenate([em.classify_k1(k) for k in est["K1"]]),
                                      np.tile(tcls, len(est["K1"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for param, rep in reports.items():
        p = out / f"voxel_bias_{param}.csv"
        em.write_voxel_csv(p, rep, first_nx, param)
        outputs.append(p)
    em.write_roi_csv(out / "roi_summary.csv", reports)
    with open(out / "classification.csv", "w", newline="\n") as fh:
        fh.write("truth,predicted,count\n")
        for i, tname in enumerate(em.Region):
            for j, pname in enumerate(em.Region):
                fh.write(f"{tname.name},{pname.name},{int(conf.matrix[i, j])}\n")
    summary = em.text_summary(reports, conf)
    (out / "report.txt").write_text(summary, encoding="utf-8")
    outputs += [out / "roi_summary.csv", out / "classification.csv", out / "report.txt"]
    write_manifest(out / "manifest.json", args, "evaluate", {"seed": None, "n_maps": len(args.maps)},
                   {"truth": args.truth, **{f"map_{i}": m for i, m in enumerate(args.maps)}}, outputs, started,
                   {"identity_residual": {k: r.identity_residual() for k, r in reports.items()}})
    sys.stdout.write(summary)


def cmd_export(args):
    started = time.perf_counter()
    nx, ny, cols = read_map_csv(args.map)
    if args.param not in ("K1", "k2", "wrss"):
        raise InvalidArgumentError("--param: expected K1, k2 or wrss")
    vals = cols[args.param]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {}
    if args.format == "pgm":
        finite = vals[np.isfinite(vals)]
        lo = float(finite.min()) if finite.size else 0.0
        hi = float(finite.max()) if finite.size else 0.0
        scaled = np.zeros(vals.size) if hi <= lo else (np.nan_to_num(vals, nan=lo) - lo) / (hi - lo) * 255.0
        pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8).reshape(ny, nx)
        out.write_bytes(f"P5\n{nx} {ny}\n255\n".encode("ascii") + pix.tobytes())
        extra["window"] = {"min": lo, "max": hi}
    else:
        with open(out, "w", newline="\n") as fh:
            fh.write(f"x,y,{args.param}\n")
            for i, v in enumerate(vals):
                fh.write(f"{i % nx},{i // nx},{float(v)!r}\n")
    write_manifest(Path(str(out) + ".manifest.json"), args, "export", {"param": args.param, "format": args.format,
                                                                   "seed": None},
                   {"map": args.map}, [out], started, extra)
    print(f"wrote {out}")


# --------------------------------------------------------------------------


def _override(argv, flag, value):
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv += [flag, value]
    return argv


def cmd_replay(args):
    """Re-run the command recorded in a manifest, optionally into another directory or worker count."""
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidArgumentError(f"manifest: file {args.manifest} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"manifest: invalid JSON ({exc})") from None
    argv = doc.get("argv")
    if not argv or argv[0] == "replay":
        raise InvalidArgumentError("manifest: no replayable argv recorded")
    if args.out:
        argv = _override(argv, "--out", args.out)
    if args.threads is not None:
        if "--threads" not in argv and argv[0] not in ("partition", "fit", "select-g"):
            raise InvalidArgumentError(f"--threads: not accepted by {argv[0]}")
        argv = _override(argv, "--threads", str(args.threads))
    rc = main(argv)
    if rc:
        raise SystemExit(rc)


def build_parser():
    p = argparse.ArgumentParser(prog="smmpet", description="Spatial mixture modelling of dynamic PET images.")
    sub = p.add_subparsers(dest="command", required=True)
    threads = dict(type=int, default=os.cpu_count() or 1, help="worker processes (default: all cores)")

    s = sub.add_parser("simulate", help="render a phantom and add noise")
    s.add_argument("--spec", default="default", help="phantom JSON, or 'default' for the built-in phantom")
    s.add_argument("--input", help="input function CSV (time_min,value)")
    s.add_argument("--frames", help="frame scheme CSV (t_start_min,t_end_min)")
    s.add_argument("--noise", choices=[k.value for k in NoiseKind], default="gaussian")
    s.add_argument("--level", type=float, default=PHANTOM_NOISE_LEVEL)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("partition", help="estimate a Potts log-partition table")
    s.add_argument("--nx", type=int, required=True)
    s.add_argument("--ny", type=int, required=True)
    s.add_argument("--g", type=int, required=True)
    s.add_argument("--beta-max", type=float, default=1.0)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--burnin", type=int, default=MCSettings.burnin)
    s.add_argument("--sweeps", type=int, default=MCSettings.sweeps)
    s.add_argument("--seed", type=int, default=MCSettings.seed)
    s.add_argument("--threads", **threads)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("fit", help="fit parametric maps with scf, skms or smm")
    s.add_argument("method", choices=["scf", "skms", "smm"])
    s.add_argument("--image", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", **threads)
    s.add_argument("--weights", choices=["counts", "unit"])
    s.add_argument("--g", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--table", help="partition table CSV (smm)")
    s.add_argument("--mode", choices=["full", "map"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--scale-multiplier", type=float)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("select-g", help="choose the component count by BIC")
    s.add_argument("--image", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--gmin", type=int, default=2)
    s.add_argument("--gmax", type=int, default=6)
    s.add_argument("--table-dir", default="potts_tables")
    s.add_argument("--config")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--scale-multiplier", type=float)
    s.add_argument("--threads", **threads)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select_g)

    s = sub.add_parser("evaluate", help="bias and classification against truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("maps", nargs="+", help="parametric-map CSVs (one per noise realisation) or directories holding map.csv files")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export", help="quick-look image or CSV of one parameter")
    s.add_argument("--map", required=True)
    s.add_argument("--param", default="K1")
    s.add_argument("--format", choices=["pgm", "csv"], default="pgm")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.add_argument("--out", help="write outputs here instead of the recorded directory")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        args.func(args)
    except (InvalidArgumentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
