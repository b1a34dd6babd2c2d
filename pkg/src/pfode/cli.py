"""Command-line entry point.

Every command reads a flat ``key = value`` config (``#`` starts a comment),
applies flag overrides, and works inside one work directory:

    cohort/    phantom-gen   subject volumes and subjects.csv
    template/  template      CN template and latent shape mask
    denoiser/  fit-denoiser  TAUW weights (local_linear) or mixture means (oracle)
    recon/     reconstruct   pseudo-healthy latents of the study subjects
    anomaly/   anomaly       anomaly maps and reports.csv
    score/     score         classifier and scores.csv
    evaluate/  evaluate      regions.csv and groups.csv on the test split
    render/    render        PGM slices

Each output directory also receives ``resolved-config.txt``.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .codec import LatentCodecSpec
from .denoise import LocalLinearDenoiser, MixtureDenoiser, MixtureModel, fit_local_linear
from .errors import ConfigError, FormatError, PfodeError
from .guide import GuidanceSpec, build_template
from .phantom import PhantomSpec, Subject, gen_phantoms, geometry, latent_shape_mask
from .pipeline import (
    FEATURES,
    AnomalyReport,
    ClassifierModel,
    evaluate_cohort,
    fit_classifier,
    make_report,
    reconstruct_subjects,
    score_reports,
)
from .sample import SAMPLERS, SamplerConfig
from .schedule import NoiseSchedule, linear_schedule
from .volcore import Volume, atomic_write_bytes, read_volume, write_pgm_slice, write_volume

log = logging.getLogger("pfode")

EXIT_CODES = {"config": 2, "io": 3, "numeric": 4}
CONFIG_NAME = "resolved-config.txt"


# --- config -----------------------------------------------------------------

def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.split(","))


def _floats(text: str) -> tuple:
    return tuple(float(p) for p in text.split(","))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, default); defaults are strings so the snapshot is their canonical form
SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "work_dir": (str, "pfode-work"),
    "seed": (int, "0"),
    # schedule
    "T": (int, "1000"),
    "beta_start": (float, "0.0001"),
    "beta_end": (float, "0.02"),
    # codec
    "k": (int, "4"),
    # phantoms
    "dims": (_ints, "64,64,64"),
    "radii": (_floats, "27.0,23.0,21.0"),
    "shell_thickness": (float, "6.0"),
    "cortex_suvr": (float, "1.2"),
    "interior_suvr": (float, "0.9"),
    "variability": (float, "0.002"),
    "anomaly_count": (_ints, "1,6"),
    "blob_radius": (_floats, "5.0,11.0"),
    "skirt": (float, "2.0"),
    "magnitude": (_floats, "0.3,1.5"),
    "cognition_noise": (float, "0.002"),
    "n_reference": (int, "40"),
    "n_healthy": (int, "50"),
    "n_anomalous": (int, "50"),
    "train_fraction": (float, "0.5"),
    # denoiser
    "denoiser": (_choice("oracle", "local_linear"), "oracle"),
    "tau2": (float, "0.00025"),
    "buckets": (int, "10"),
    "lambda": (float, "0.001"),
    "draws": (int, "4"),
    # sampler and guidance
    "sampler": (_choice(*SAMPLERS), "d1"),
    "t_start": (int, "400"),
    "nu": (float, "1.0"),
    "grad_mode": (_choice("full", "stop_gradient"), "full"),
    "cfg_scale": (float, "0.0"),
    # scoring and evaluation
    "m_source": (_choice("input", "anomaly_map"), "input"),
    "clf_lr": (float, "0.5"),
    "clf_iters": (int, "2000"),
    "threshold": (float, "0.5"),
    "proxy": (_choice("injected", "cognition"), "cognition"),
    # render
    "render_volume": (str, ""),
    "render_z": (int, "-1"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict
    raw: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def snapshot(self) -> str:
        lines = [f"# pfode {__version__} resolved config"]
        lines += [f"{key} = {self.raw[key]}" for key in SCHEMA]
        return "\n".join(lines) + "\n"

    @property
    def work(self) -> Path:
        return Path(self.values["work_dir"])

    def phantom_spec(self, seed: int) -> PhantomSpec:
        v = self.values
        return PhantomSpec(
            dims=v["dims"], k=v["k"], radii=v["radii"], shell_thickness=v["shell_thickness"],
            cortex_suvr=v["cortex_suvr"], interior_suvr=v["interior_suvr"], variability=v["variability"],
            anomaly_count=v["anomaly_count"], blob_radius=v["blob_radius"], skirt=v["skirt"],
            magnitude=v["magnitude"], cognition_noise=v["cognition_noise"], seed=seed,
        )

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self["T"], self["beta_start"], self["beta_end"])


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw_overrides: dict) -> RunConfig:
    raw = {key: default for key, (_, default) in SCHEMA.items()}
    raw.update(raw_overrides)
    values = {}
    for key, (parse, _) in SCHEMA.items():
        try:
            values[key] = parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: cannot parse {raw[key]!r} ({exc})") from exc
    if values["t_start"] > values["T"]:
        raise ConfigError(f"key 't_start': {values['t_start']} exceeds T={values['T']}")
    if not 0.0 < values["train_fraction"] < 1.0:
        raise ConfigError("key 'train_fraction': must lie strictly between 0 and 1")
    return RunConfig(values, raw)


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
        raw = parse_config_text(text, str(p))
    for key in overrides:
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
    raw.update(overrides)
    return resolve_config(raw)


# --- small I/O helpers --------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}; run the producing command first") from exc


def _outdir(cfg: RunConfig, name: str) -> Path:
    d = cfg.work / name
    d.mkdir(parents=True, exist_ok=True)
    _write_text(d / CONFIG_NAME, cfg.snapshot())
    return d


def _fmt(x: float) -> str:
    return repr(float(x))


# --- cohort bookkeeping -------------------------------------------------------

@dataclass
class CohortEntry:
    id: str
    group: str  # reference | study
    split: str  # fit | train | test
    label: str
    injected: float
    cognition: float


def _split_study(n: int, fraction: float, seed: int) -> list[str]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    split = ["test"] * n
    for i in order[:n_train]:
        split[i] = "train"
    return split


def _read_cohort(cfg: RunConfig) -> list[CohortEntry]:
    rows = _read_csv(cfg.work / "cohort" / "subjects.csv")
    return [CohortEntry(r["id"], r["group"], r["split"], r["label"], float(r["injected"]), float(r["cognition"]))
            for r in rows]


def _load_subject(cfg: RunConfig, entry: CohortEntry) -> Subject:
    d = cfg.work / "cohort"
    return Subject(
        entry.id,
        read_volume(d / f"{entry.id}.image.tauv"),
        read_volume(d / f"{entry.id}.latent.tauv"),
        read_volume(d / f"{entry.id}.edge.tauv"),
        read_volume(d / f"{entry.id}.truth.tauv"),
        entry.label,
        entry.injected,
        entry.cognition,
    )


# --- commands -----------------------------------------------------------------

def cmd_phantom_gen(cfg: RunConfig, jobs: int) -> None:
    out = _outdir(cfg, "cohort")
    seed = cfg["seed"]
    reference = gen_phantoms(cfg.phantom_spec(2 * seed), cfg["n_reference"], 0)
    study = gen_phantoms(cfg.phantom_spec(2 * seed + 1), cfg["n_healthy"], cfg["n_anomalous"])
    splits = _split_study(len(study), cfg["train_fraction"], seed)
    rows = []
    for group, subjects, split in (("reference", reference, ["fit"] * len(reference)), ("study", study, splits)):
        for s, sp in zip(subjects, split):
            sid = f"R{s.id}" if group == "reference" else s.id
            write_volume(out / f"{sid}.image.tauv", s.image)
            write_volume(out / f"{sid}.latent.tauv", s.latent)
            write_volume(out / f"{sid}.edge.tauv", s.edge)
            write_volume(out / f"{sid}.truth.tauv", s.truth)
            rows.append([sid, group, sp, s.label, _fmt(s.injected), _fmt(s.cognition)])
    _write_csv(out / "subjects.csv", ["id", "group", "split", "label", "injected", "cognition"], rows)
    log.info("wrote %d subjects to %s", len(rows), out)


def _reference(cfg: RunConfig) -> list[Subject]:
    ref = [_load_subject(cfg, e) for e in _read_cohort(cfg) if e.group == "reference"]
    if not ref:
        raise ConfigError("key 'n_reference': cohort has no reference subjects")
    return ref


def cmd_template(cfg: RunConfig, jobs: int) -> None:
    ref = _reference(cfg)
    out = _outdir(cfg, "template")
    tmpl = build_template([s.latent.array for s in ref])
    write_volume(out / "template.tauv", Volume(tmpl))
    write_volume(out / "shape.tauv", Volume(latent_shape_mask(cfg.phantom_spec(cfg["seed"]))))


def cmd_fit_denoiser(cfg: RunConfig, jobs: int) -> None:
    ref = _reference(cfg)
    out = _outdir(cfg, "denoiser")
    s = cfg.schedule()
    lat = [np.asarray(x.latent.array, dtype=np.float64) for x in ref]
    if cfg["denoiser"] == "oracle":
        write_volume(out / "mixture.tauv", Volume(np.stack(lat)))
    else:
        den = fit_local_linear(lat, [x.condition for x in ref], s, cfg["buckets"], cfg["lambda"],
                               cfg["seed"], cfg["draws"])
        den.save(out / "denoiser.tauw")


def _load_denoiser(cfg: RunConfig):
    d = cfg.work / "denoiser"
    s = cfg.schedule()
    if cfg["denoiser"] == "oracle":
        means = np.asarray(read_volume(d / "mixture.tauv").data, dtype=np.float64)
        k = len(means)
        return MixtureDenoiser(MixtureModel(np.full(k, 1.0 / k), means, cfg["tau2"]), s)
    return LocalLinearDenoiser.load(d / "denoiser.tauw", s)


def _guidance(cfg: RunConfig) -> Optional[GuidanceSpec]:
    if cfg["nu"] == 0.0 and cfg["cfg_scale"] == 0.0:
        return None
    d = cfg.work / "template"
    return GuidanceSpec(read_volume(d / "template.tauv").array, read_volume(d / "shape.tauv").array,
                        nu=cfg["nu"], grad_mode=cfg["grad_mode"], cfg_scale=cfg["cfg_scale"])


def _study(cfg: RunConfig) -> list[CohortEntry]:
    return [e for e in _read_cohort(cfg) if e.group == "study"]


def cmd_reconstruct(cfg: RunConfig, jobs: int) -> None:
    entries = _study(cfg)
    subjects = [_load_subject(cfg, e) for e in entries]
    den = _load_denoiser(cfg)
    scfg = SamplerConfig(cfg["sampler"], cfg["t_start"], seed=cfg["seed"], noise_seed=cfg["seed"],
                         guidance=_guidance(cfg))
    recons = reconstruct_subjects(subjects, scfg, den, jobs)
    out = _outdir(cfg, "recon")
    for s, r in zip(subjects, recons):
        write_volume(out / f"{s.id}.recon.tauv", Volume(r))


def cmd_anomaly(cfg: RunConfig, jobs: int) -> None:
    entries = _study(cfg)
    brain = geometry(cfg.phantom_spec(cfg["seed"])).brain
    codec = LatentCodecSpec(cfg["k"])
    rows = []
    out = _outdir(cfg, "anomaly")
    for e in entries:
        s = _load_subject(cfg, e)
        recon = read_volume(cfg.work / "recon" / f"{e.id}.recon.tauv").array
        rep = make_report(s.image.array, s.latent.array, recon, brain, codec, cfg["m_source"])
        write_volume(out / f"{e.id}.amap.tauv", rep.anomaly_map)
        rows.append([e.id, _fmt(rep.m_suvr)] + [_fmt(f) for f in rep.features])
    _write_csv(out / "reports.csv", ["id", "m_suvr", *FEATURES], rows)


def _read_reports(cfg: RunConfig) -> dict[str, AnomalyReport]:
    out = {}
    for r in _read_csv(cfg.work / "anomaly" / "reports.csv"):
        amap = cfg.work / "anomaly" / f"{r['id']}.amap.tauv"
        out[r["id"]] = AnomalyReport(read_volume(amap), float(r["m_suvr"]), None,
                                     tuple(float(r[f]) for f in FEATURES))
    return out


def cmd_score(cfg: RunConfig, jobs: int) -> None:
    entries = _study(cfg)
    reports = _read_reports(cfg)
    train = [(reports[e.id], int(e.label == "anomalous")) for e in entries if e.split == "train"]
    clf = fit_classifier(train, seed=cfg["seed"], lr=cfg["clf_lr"], iters=cfg["clf_iters"])
    scored = score_reports([reports[e.id] for e in entries], clf)
    out = _outdir(cfg, "score")
    _write_csv(out / "classifier.csv", ["feature", "weight", "mean", "scale"],
               [[f, _fmt(w), _fmt(m), _fmt(sc)] for f, w, m, sc in zip(FEATURES, clf.weights, clf.mean, clf.scale)]
               + [["bias", _fmt(clf.bias), "", ""]])
    _write_csv(out / "scores.csv", ["id", "split", "label", "m_suvr", "p_cls", "score"],
               [[e.id, e.split, e.label, _fmt(r.m_suvr), _fmt(r.p_cls), _fmt(r.score)] for e, r in zip(entries, scored)])


def cmd_evaluate(cfg: RunConfig, jobs: int) -> None:
    entries = [e for e in _study(cfg) if e.split == "test"]
    scores = {r["id"]: r for r in _read_csv(cfg.work / "score" / "scores.csv")}
    subjects, reports = [], []
    for e in entries:
        if e.id not in scores:
            raise FormatError(f"{cfg.work / 'score' / 'scores.csv'}: no score for subject {e.id}")
        row = scores[e.id]
        subjects.append(_load_subject(cfg, e))
        reports.append(AnomalyReport(Volume.zeros((1, 1, 1)), float(row["m_suvr"]), float(row["p_cls"])))
    geo = geometry(cfg.phantom_spec(cfg["seed"]))
    names = ("lobe_xneg_yneg", "lobe_xneg_ypos", "lobe_xpos_yneg", "lobe_xpos_ypos")
    proxy = [e.injected if cfg["proxy"] == "injected" else e.cognition for e in entries]
    table = evaluate_cohort(subjects, reports, list(zip(names, geo.lobes)), proxy, cfg["threshold"])
    out = _outdir(cfg, "evaluate")
    _write_text(out / "regions.csv", table.regions_csv())
    _write_text(out / "groups.csv", table.groups_csv())


def cmd_render(cfg: RunConfig, jobs: int) -> None:
    if not cfg["render_volume"]:
        raise ConfigError("key 'render_volume': path of the volume to render is required")
    src = Path(cfg["render_volume"])
    vol = read_volume(src)
    out = _outdir(cfg, "render")
    z = None if cfg["render_z"] < 0 else cfg["render_z"]
    if z is not None and z >= vol.dims[2]:
        raise ConfigError(f"key 'render_z': slice {z} outside 0..{vol.dims[2] - 1}")
    name = src.name[: -len(".tauv")] if src.name.endswith(".tauv") else src.name
    write_pgm_slice(out / f"{name}.pgm", vol, z)


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "template": cmd_template,
    "fit-denoiser": cmd_fit_denoiser,
    "reconstruct": cmd_reconstruct,
    "anomaly": cmd_anomaly,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfode", description="Deterministic diffusion anomaly detection on phantoms.")
    p.add_argument("--version", action="version", version=f"pfode {__version__}")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--jobs", type=int, default=1, help="subject-level worker threads")
    p.add_argument("--seed", type=int, help="override the 'seed' key")
    p.add_argument("--out", help="work directory (overrides 'work_dir')")
    p.add_argument("--sampler", choices=SAMPLERS, help="override the 'sampler' key")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return p


def _setup_logging() -> None:
    level = os.environ.get("PFODE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"PFODE_LOG={level!r}; expected error, info or debug")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["work_dir"] = args.out
        if args.sampler is not None:
            overrides["sampler"] = args.sampler
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args.jobs)
    except PfodeError as exc:
        print(f"pfode: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(f"pfode: io error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"pfode: numeric error: {exc}", file=sys.stderr)
        return EXIT_CODES["numeric"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
