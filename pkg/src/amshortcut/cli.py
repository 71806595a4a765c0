"""Command-line entry point.

    amshortcut <gen-data|train|sample|evaluate|sweep> --config PATH [--seed N] [--out DIR]

Every command writes ``config.resolved`` into its output directory; running
again from that file reproduces the outputs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .analysis import adf, dist_rmsd, observables, rdf, regression_metrics
from .config import ConfigError, load_config, parse_condition, write_config
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import ScheduleConfig
from .extxyz import ExtXYZError, read_extxyz, write_extxyz
from .geometry import Cell
from .material import strip_ghost_atoms
from .sampling import SamplerConfig, generate_batch, write_manifest
from .toydata import COORD_FACTOR, PROPERTY_NAMES, TOY_SPECIES, ToyDatasetConfig, generate_toy_dataset, properties_of
from .training import TrainConfig, train

log = logging.getLogger("amshortcut")

VOCAB = ToyDatasetConfig().vocab


class CommandError(RuntimeError):
    pass


def _require(cfg, key):
    path = cfg[key]
    if not path:
        raise CommandError(f"config key {key} is not set")
    if not Path(path).exists():
        raise CommandError(f"{key}: file not found: {path}")
    return Path(path)


def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def toy_config(cfg) -> ToyDatasetConfig:
    return ToyDatasetConfig(
        n_samples=cfg["data.n_samples"], edge=cfg["data.edge"], atoms_min=cfg["data.atoms_min"],
        atoms_max=cfg["data.atoms_max"], frac_A_min=cfg["data.frac_A_min"], frac_A_max=cfg["data.frac_A_max"],
        r0=cfg["data.r0"], rho_max=cfg["data.rho_max"], relax_steps=cfg["data.relax_steps"],
        step_size=cfg["data.step_size"], seed=cfg["seed"],
    )


def denoiser_config(cfg, dataset) -> DenoiserConfig:
    """Model config with property standardisation fitted on the dataset labels."""
    names = tuple(cfg["model.properties"])
    unknown = [n for n in names if n not in PROPERTY_NAMES]
    if unknown:
        raise CommandError(f"unknown properties {unknown}; choose from {list(PROPERTY_NAMES)}")
    vals = np.array([[s.props[n] for n in names] for s, _ in dataset]).reshape(len(dataset), len(names))
    mean = vals.mean(axis=0) if len(dataset) else np.zeros(len(names))
    std = vals.std(axis=0) if len(dataset) else np.ones(len(names))
    std = np.where(std > 0, std, 1.0)
    mode = cfg["train.mode"]
    return DenoiserConfig(
        d_E=VOCAB.d_E, n_p=len(names), layers=cfg["model.layers"], channels=cfg["model.channels"],
        hidden=cfg["model.hidden"], prop_dim=cfg["model.prop_dim"], cutoff=cfg["model.cutoff"],
        n_norm=cfg["model.n_norm"], sigma_max_E=cfg["schedule.sigma_max_E"],
        step_size_conditioned=cfg["model.step_size_conditioned"] or mode == "shortcut",
        output="drift" if mode == "ode" else "noise",
        prop_names=names, prop_mean=tuple(mean), prop_std=tuple(std),
    )


def schedule(cfg) -> ScheduleConfig:
    return ScheduleConfig(sigma_max_X=cfg["schedule.sigma_max_X"], sigma_max_E=cfg["schedule.sigma_max_E"])


def load_model(path):
    """Returns the denoiser and the noise schedule it was trained with."""
    try:
        params, meta = ad.load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise CommandError(str(exc)) from exc
    if "denoiser" not in meta:
        raise CommandError(f"{path}: checkpoint has no denoiser configuration")
    sched = ScheduleConfig(**meta["schedule"]) if "schedule" in meta else ScheduleConfig()
    return Denoiser(DenoiserConfig.from_dict(meta["denoiser"]), params), sched


def _sampler(cfg, n_s=None) -> SamplerConfig:
    return SamplerConfig(n_s=n_s or cfg["sample.n_s"], mode=cfg["sample.mode"], seed=cfg["seed"],
                         batch_size=cfg["sample.batch_size"])


def _targets(cfg, model):
    return parse_condition(cfg["sample.condition"], cfg["sample.n_samples"], model.cfg.prop_names)


def cmd_gen_data(cfg, out: Path):
    dataset = generate_toy_dataset(toy_config(cfg))
    write_extxyz([s for s, _ in dataset], out / "dataset.extxyz", VOCAB)
    log.info("wrote %d samples to %s", len(dataset), out / "dataset.extxyz")


def cmd_train(cfg, out: Path):
    samples = read_extxyz(_require(cfg, "paths.dataset"), VOCAB)
    if not samples:
        raise CommandError("dataset is empty")
    missing = [n for n in cfg["model.properties"] if any(n not in s.props for s in samples)]
    if missing:
        raise CommandError(f"dataset lacks property labels {missing}")
    dataset = [(s, properties_of(s, cfg["model.properties"])) for s in samples]
    dcfg = denoiser_config(cfg, dataset)
    model = Denoiser(dcfg, seed=cfg["seed"])
    tcfg = TrainConfig(
        mode=cfg["train.mode"], elem_weight=cfg["train.elem_weight"],
        shortcut_fraction=cfg["train.shortcut_fraction"], n_base=cfg["train.n_base"],
        batch_size=cfg["train.batch_size"], lr=cfg["train.lr"], steps=cfg["train.steps"], seed=cfg["seed"],
        checkpoint_every=cfg["train.checkpoint_every"], grad_clip=cfg["train.grad_clip"],
    )
    log_path = out / "train_log.csv"
    log_path.unlink(missing_ok=True)
    _, records = train(dataset, tcfg, model, schedule(cfg), log_path=log_path, checkpoint_path=out / "model.ckpt",
                       progress_every=max(1, tcfg.steps // 20))
    _write_table(out / "train_losses.tsv", ["step", "loss_sde", "loss_sc"], [r[:3] for r in records])


def cmd_sample(cfg, out: Path):
    model, sched = load_model(_require(cfg, "paths.checkpoint"))
    targets = _targets(cfg, model)
    samples = generate_batch(model, Cell.cubic(cfg["sample.edge"]), cfg["sample.rho_max"], targets, _sampler(cfg),
                             sched)
    write_extxyz(samples, out / "samples.extxyz", VOCAB)
    write_manifest(out / "manifest.tsv", targets, model.cfg.prop_names)


def _read_manifest(path):
    lines = Path(path).read_text().splitlines()
    names = lines[0].split("\t")[1:]
    rows = [[None if v == "null" else float(v) for v in line.split("\t")[1:]] for line in lines[1:] if line]
    return names, rows


def structure_metrics(cfg, samples, reference):
    gen = [strip_ghost_atoms(s) for s in samples]
    ref = [strip_ghost_atoms(s) for s in reference]
    out = {}
    rdf_gen = rdf(gen, cfg["eval.rdf_cutoff"], cfg["eval.rdf_bins"])
    rdf_ref = rdf(ref, cfg["eval.rdf_cutoff"], cfg["eval.rdf_bins"])
    adf_gen = adf(gen, cfg["eval.adf_cutoff"], cfg["eval.adf_bins"])
    adf_ref = adf(ref, cfg["eval.adf_cutoff"], cfg["eval.adf_bins"])
    out["rdf_rmsd"] = dist_rmsd(rdf_gen, rdf_ref)
    out["adf_rmsd"] = dist_rmsd(adf_gen, adf_ref)
    out["mean_atoms"] = float(np.mean([s.n_atoms for s in gen]))
    return out, (rdf_gen, adf_gen)


def cmd_evaluate(cfg, out: Path):
    samples = read_extxyz(_require(cfg, "paths.samples"), VOCAB)
    reference = read_extxyz(_require(cfg, "paths.reference"), VOCAB)
    if not samples or not reference:
        raise CommandError("sample and reference sets must be non-empty")
    metrics, (rdf_gen, adf_gen) = structure_metrics(cfg, samples, reference)
    rows = [(k, v) for k, v in metrics.items()]
    if cfg["paths.manifest"]:
        names, targets = _read_manifest(_require(cfg, "paths.manifest"))
        if len(targets) != len(samples):
            raise CommandError(f"manifest lists {len(targets)} targets for {len(samples)} samples")
        r0 = cfg["data.r0"]
        realized = [observables(s, COORD_FACTOR * r0, TOY_SPECIES) for s in samples]
        for j, name in enumerate(names):
            idx = [i for i, t in enumerate(targets) if t[j] is not None]
            if not idx:
                continue
            got = [_observable(realized[i], name) for i in idx]
            for key, val in regression_metrics([targets[i][j] for i in idx], got).items():
                rows.append((f"{name}_{key}", val))
    _write_table(out / "metrics.tsv", ["metric", "value"], rows)
    (out / "rdf.tsv").write_text(rdf_gen.to_table())
    (out / "adf.tsv").write_text(adf_gen.to_table())


def _observable(obs, name):
    if name == "frac_A":
        return obs["fractions"]["A"]
    return obs[name]


def cmd_sweep(cfg, out: Path):
    model, sched = load_model(_require(cfg, "paths.checkpoint"))
    reference = read_extxyz(_require(cfg, "paths.reference"), VOCAB)
    targets = _targets(cfg, model)
    rows, timing = [], []
    for raw in cfg["sweep.steps"]:
        n_s = int(raw)
        start = time.perf_counter()
        try:
            samples = generate_batch(model, Cell.cubic(cfg["sample.edge"]), cfg["sample.rho_max"], targets,
                                     _sampler(cfg, n_s), sched)
            m, _ = structure_metrics(cfg, samples, reference)
            rows.append((n_s, m["rdf_rmsd"], m["adf_rmsd"], m["mean_atoms"], "ok"))
        except (FloatingPointError, ValueError) as exc:
            rows.append((n_s, "nan", "nan", "nan", f"error: {exc}".replace("\t", " ")))
        timing.append((n_s, round(time.perf_counter() - start, 3)))
        log.info("n_s=%d done in %.1fs", n_s, timing[-1][1])
    _write_table(out / "sweep.tsv", ["n_s", "rdf_rmsd", "adf_rmsd", "mean_atoms", "status"], rows)
    _write_table(out / "sweep_timing.tsv", ["n_s", "wallclock_s"], timing)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amshortcut", description="Few-step amorphous material generation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("AMSHORTCUT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / "config.resolved")
        COMMANDS[args.command](cfg, out)
    except (ConfigError, CommandError, ExtXYZError, OSError, ValueError, FloatingPointError) as exc:
        print(f"amshortcut {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
