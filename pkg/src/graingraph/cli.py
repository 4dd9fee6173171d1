"""Command-line pipeline: init, extract, match, evolve, reconstruct, analyze."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DataFormatError, GrainGraphError
from .evolution import BaselinePredictor, EventLog, Thresholds, Trajectory, identity_predict, rollout
from .graph import DomainSpec, load_graph, normalize_features, save_graph
from .gnn import GNNPredictor, load_weights
from .metrics import equivalent_diameter, ks_critical, ks_statistic, misclassification_rate, qoi_from_trajectory
from .raster import (
    IndexImage,
    default_resolution,
    graph_to_image,
    image_to_graph,
    read_gidx,
    read_gvol,
    stack_layers,
    write_gidx,
    write_gvol,
)
from .substrate import SubstrateSpec, generate_substrate
from .topology import delta_z_policy, load_elimination_table, write_training_archive

log = logging.getLogger("graingraph")

LAYER_NAME = "layer_{:04d}.graph"
EVENTS = "events.log"
PROVENANCE = "provenance.json"
DEFAULT_RESOLUTION = 12.5  # pixels per um


# -- configuration ------------------------------------------------------------


def load_config(path) -> dict:
    """Read a YAML or JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def domain_from(cfg: dict) -> DomainSpec:
    try:
        return DomainSpec(**(cfg.get("domain") or {}))
    except TypeError as exc:
        raise ConfigError(f"domain block: {exc}") from exc


def _substrate_block(cfg: dict) -> dict:
    block = cfg.get("substrate")
    if not isinstance(block, dict):
        raise ConfigError("config needs a substrate block")
    sources = [k for k in ("sampler", "image", "graph") if k in block]
    if len(sources) != 1:
        raise ConfigError(f"substrate needs exactly one of sampler/image/graph, got {sources or 'none'}")
    return block


def substrate_from(cfg: dict, domain: DomainSpec):
    """Initial graph from a sampler spec, an index image or a graph file."""
    block = _substrate_block(cfg)
    if "graph" in block:
        return load_graph(block["graph"])
    if "image" in block:
        img = read_gidx(block["image"], domain)
        graph, _ = image_to_graph(img, repair=bool(block.get("repair", False)))
        return graph
    keys = {k: v for k, v in block.items() if k in ("sampler", "d0", "amplitude", "n_seeds", "rng_seed", "theta0", "theta_spread")}
    unknown = set(block) - set(keys) - {"raster"}
    if unknown:
        raise ConfigError(f"unknown substrate keys {sorted(unknown)}")
    if "seed" in cfg:
        keys.setdefault("rng_seed", cfg["seed"])
    return generate_substrate(SubstrateSpec(domain=domain, **keys))


def predictor_from(cfg: dict):
    block = cfg.get("predictor") or {"kind": "baseline"}
    kind = block.get("kind", "baseline")
    if kind == "identity":
        return identity_predict
    if kind == "baseline":
        params = {k: block[k] for k in ("kappa", "c1", "c2", "c3", "dz") if k in block}
        return BaselinePredictor(**params)
    if kind == "gnn":
        try:
            reg = load_weights(block["regressor"]["manifest"], block["regressor"]["blob"])
            cls = load_weights(block["classifier"]["manifest"], block["classifier"]["blob"])
        except (KeyError, TypeError) as exc:
            raise ConfigError("gnn predictor needs regressor/classifier manifest and blob paths") from exc
        return GNNPredictor(reg, cls)
    raise ConfigError(f"unknown predictor kind {kind!r}")


def thresholds_from(cfg: dict) -> Thresholds:
    block = cfg.get("thresholds") or {}
    try:
        return Thresholds(**block)
    except TypeError as exc:
        raise ConfigError(f"thresholds block: {exc}") from exc


def layers_from(cfg: dict, domain: DomainSpec) -> tuple[float, int]:
    """(dz, n_l) from either an explicit count or an elimination table."""
    block = cfg.get("layers")
    if not isinstance(block, dict):
        raise ConfigError("config needs a layers block (n_l or table)")
    if ("n_l" in block) == ("table" in block):
        raise ConfigError("layers needs exactly one of n_l or table")
    if "table" in block:
        table = load_elimination_table(block["table"])
        return delta_z_policy((domain.g_z, domain.r_z), table, domain.lz, domain)
    n_l = int(block["n_l"])
    if n_l < 2:
        raise ConfigError(f"need at least 2 layers, got {n_l}")
    dz = float(block.get("dz", domain.lz / (n_l - 1)))
    return dz, n_l


def out_dir(args, cfg: dict | None = None) -> Path:
    """Output directory: environment override, then --out, then config."""
    d = os.environ.get("GRAINGRAPH_OUT") or args.out or (cfg or {}).get("output") or "."
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_provenance(path: Path, cfg: dict, **extra) -> None:
    doc = {"config": cfg, "config_sha256": config_hash(cfg), "version": __version__}
    doc.update(extra)
    (path / PROVENANCE).write_text(json.dumps(doc, sort_keys=True, indent=1, default=str))


def _resolution(args, cfg: dict) -> float:
    r = args.resolution if args.resolution is not None else cfg.get("resolution", DEFAULT_RESOLUTION)
    if not r > 0:
        raise ConfigError(f"resolution must be positive, got {r}")
    return float(r)


# -- subcommands ------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None and "sampler" in (cfg.get("substrate") or {}):
        cfg["substrate"]["rng_seed"] = args.seed
    domain = domain_from(cfg)
    graph = substrate_from(cfg, domain)
    out = out_dir(args, cfg)
    save_graph(graph, out / "substrate.graph")
    if (cfg.get("substrate") or {}).get("raster"):
        w, h = default_resolution(domain, _resolution(args, cfg))
        write_gidx(graph_to_image(graph, w, h), out / "substrate.gidx")
    write_provenance(out, cfg, command="init")
    print(f"substrate: {graph.n_grains} grains, {graph.n_junctions} junctions -> {out}")
    return 0


def cmd_extract(args) -> int:
    domain = domain_from(load_config(args.config)) if args.config else None
    img = read_gidx(args.image, domain)
    graph, _ = image_to_graph(img, strict=args.strict, repair=args.repair)
    out = out_dir(args)
    target = out / (Path(args.image).stem + ".graph")
    save_graph(graph, target)
    print(f"{args.image}: {graph.n_grains} grains, {graph.n_junctions} junctions -> {target}")
    return 0


def cmd_match(args) -> int:
    if len(args.images) < 2:
        raise ConfigError("match needs at least two images")
    domain = domain_from(load_config(args.config)) if args.config else None
    graphs = []
    for path in args.images:
        graph, _ = image_to_graph(read_gidx(path, domain), repair=args.repair)
        graphs.append(graph)
    out = out_dir(args)
    n = write_training_archive(zip(graphs[:-1], graphs[1:]), out / "pairs.jsonl")
    print(f"{n} training pairs -> {out / 'pairs.jsonl'}")
    return 0


def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
        if "sampler" in (cfg.get("substrate") or {}):
            cfg["substrate"]["rng_seed"] = args.seed
    domain = domain_from(cfg)
    dz, n_l = layers_from(cfg, domain)
    predictor = predictor_from(cfg)
    thresholds = thresholds_from(cfg)
    g0 = substrate_from(cfg, domain)
    out = out_dir(args, cfg)
    for old in out.glob("layer_*.graph"):
        old.unlink()
    events = open(out / EVENTS, "w")

    def on_layer(step, graph, elog):
        save_graph(graph, out / LAYER_NAME.format(step))
        for rec in elog.records if elog else ():
            events.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        traj = rollout(g0, normalize_features(g0), predictor, n_l, thresholds, dz=dz, on_layer=on_layer)
    finally:
        events.close()
    err = traj.error
    write_provenance(
        out, cfg, command="evolve", dz=dz, n_l=n_l, layers_written=len(traj.graphs), error=str(err) if err else None
    )
    print(f"{len(traj.graphs)} of {n_l} layers, {traj.eliminated_counts()[-1]} grains eliminated -> {out}")
    if err is not None:
        print(f"error: rollout stopped early: {err}", file=sys.stderr)
        return err.exit_code
    return 0


def load_trajectory(path) -> Trajectory:
    """Rebuild a trajectory from a directory written by ``evolve``."""
    path = Path(path)
    files = sorted(path.glob("layer_*.graph"))
    if not files:
        raise DataFormatError(f"{path}: no layer files")
    graphs = [load_graph(f) for f in files]
    dz = graphs[1].dz if len(graphs) > 1 else 0.0
    prov = path / PROVENANCE
    if prov.exists():
        dz = json.loads(prov.read_text()).get("dz", dz)
    logs = [EventLog(step) for step in range(1, len(graphs))]
    ev = path / EVENTS
    if ev.exists():
        for line in ev.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if 1 <= rec["step"] <= len(logs):
                    logs[rec["step"] - 1].records.append(rec)
    return Trajectory(graphs, [normalize_features(g) for g in graphs], dz, logs)


def _rasterise(job):
    graph, w, h = job
    return graph_to_image(graph, w, h)


def render_layers(graphs, w, h, workers: int = 1) -> list[IndexImage]:
    jobs = [(g, w, h) for g in graphs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_rasterise, jobs))
    return [_rasterise(j) for j in jobs]


def cmd_reconstruct(args) -> int:
    traj = load_trajectory(args.trajectory)
    domain = traj.graphs[0].domain
    w, h = default_resolution(domain, _resolution(args, {}))
    images = render_layers(traj.graphs, w, h, args.workers)
    out = out_dir(args)
    for k, img in enumerate(images):
        write_gidx(img, out / f"layer_{k:04d}.gidx")
    write_gvol(stack_layers(images, traj.dz if traj.dz > 0 else 1.0), out / "volume.gvol")
    print(f"{len(images)} layers at {w}x{h} -> {out}")
    return 0


def reference_sizes(vol, all_grains: bool = False) -> np.ndarray:
    """Equivalent diameters of the grains in a reference index volume,
    by default only those present in its top layer."""
    d = vol.domain
    voxel = (d.lx / vol.data.shape[2]) * (d.ly / vol.data.shape[1]) * vol.dz
    ids, counts = np.unique(vol.data, return_counts=True)
    if not all_grains:
        keep = np.isin(ids, np.unique(vol.data[-1]))
        counts = counts[keep]
    return equivalent_diameter(counts * voxel)


def cmd_analyze(args) -> int:
    traj = load_trajectory(args.trajectory)
    rep = qoi_from_trajectory(traj, all_grains=args.all_grains)
    doc = {"qoi": rep.to_dict()}
    if args.reference:
        ref = read_gvol(args.reference, traj.graphs[0].domain)
        if ref.depth != len(traj.graphs):
            raise DataFormatError(f"reference has {ref.depth} layers, trajectory has {len(traj.graphs)}")
        h, w = ref.data.shape[1:]
        images = render_layers(traj.graphs, w, h, args.workers)
        doc["mr"] = [misclassification_rate(img.data, ref.data[k]) for k, img in enumerate(images)]
        ours = np.asarray(list(rep.sizes.values()) if args.all_grains else rep.size_cdf[0])
        theirs = reference_sizes(ref, args.all_grains)
        doc["ks"] = ks_statistic(ours, theirs)
        doc["ks_critical_0.95"] = ks_critical(0.95, len(ours), len(theirs))
    text = json.dumps(doc, sort_keys=True, indent=1)
    if args.out or os.environ.get("GRAINGRAPH_OUT"):
        (out_dir(args) / "report.json").write_text(text)
    print(text)
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (GRAINGRAPH_OUT overrides)")
    common.add_argument("--workers", type=int, default=1, help="processes for per-layer rasterisation")
    common.add_argument("--seed", type=int, help="override the config rng seed")
    common.add_argument("--resolution", type=float, help="pixels per micron (default 12.5)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="graingraph", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="draw a substrate graph")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("extract", parents=[common], help="index image -> graph")
    s.add_argument("image")
    s.add_argument("--config", help="run config supplying the domain block")
    s.add_argument("--strict", action="store_true", help="reject pixels touching four or more grains")
    s.add_argument("--repair", action="store_true", help="absorb detached grain fragments")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("match", parents=[common], help="image stack -> training-pair archive")
    s.add_argument("images", nargs="+")
    s.add_argument("--config", help="run config supplying the domain block")
    s.add_argument("--repair", action="store_true")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("evolve", parents=[common], help="roll a substrate forward")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("reconstruct", parents=[common], help="trajectory -> GIDX layers and a GVOL volume")
    s.add_argument("trajectory")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("analyze", parents=[common], help="quantities of interest of a trajectory")
    s.add_argument("trajectory")
    s.add_argument("--reference", help="GVOL volume to compare against")
    s.add_argument("--all-grains", action="store_true", help="size distribution over every grain ever alive")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return args.func(args)
    except GrainGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
