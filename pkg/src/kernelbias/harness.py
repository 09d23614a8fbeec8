"""Pipeline orchestrator: kernel-size sweep training, OOD perturbation
campaigns, spectral diagnostics, and causal regression reports.

CLI verbs: train-sweep, attack, inject-sweep, regress, report. Each reads a
flat INI-style config (key = value under [section] headers) and writes CSVs
and checkpoints into the output directory. Everything is deterministic: a
rerun with the same config produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, causal, dataset, imgfreq, nnet

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "ConfigError",
    "load_config",
    "cmd_train_sweep",
    "cmd_attack",
    "cmd_inject_sweep",
    "cmd_regress",
    "cmd_report",
    "main",
]


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class RunRecord:
    """One per-sample observation row feeding the causal regression."""

    sample_id: str
    flks: int
    seed: int
    subgroup: dict[str, object]
    descriptor: str  # attack kind or injection frequency
    y: float


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    image_size: int = 32
    dataset_seed: int = 0
    train_fraction: float = 0.8
    split_seed: int = 1
    manifest: str | None = None
    groups: dict[str, dataset.GroupSpec] = field(default_factory=dict)
    # sweep
    flks_values: tuple[int, ...] = (3, 5, 7, 9, 11)
    seeds_per_setting: int = 3
    conv2_kernel: int = 3
    sweep_all_kernels: bool = False
    init_variance: float = 0.02
    balance_groups: bool = False
    # training
    hyper: nnet.TrainHyper = field(default_factory=nnet.TrainHyper)
    # attack
    attack_kind: str = "cw"  # fgsm | cw | both
    attack_params: attacks.AttackParams = field(default_factory=attacks.AttackParams)
    dump_perturbations: bool = False
    # injection
    inject_frequencies: tuple[float, ...] = (0.06, 0.10, 0.14, 0.18)
    inject_delta_width: float = 2.0
    inject_delta_gain: float = 15.0
    # regression
    protected: tuple[str, ...] = ("group",)
    controls: tuple[str, ...] = ()
    frequency_bands: tuple[tuple[float, float], ...] = (
        (0.05, 0.07),
        (0.09, 0.11),
        (0.13, 0.15),
        (0.17, 0.19),
    )

    def __post_init__(self):
        for k in self.flks_values:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"flks values must be odd and >= 3, got {k}")
        if self.seeds_per_setting < 1:
            raise ConfigError("seeds_per_setting must be >= 1")
        if self.attack_kind not in ("fgsm", "cw", "both"):
            raise ConfigError(f"attack kind must be fgsm/cw/both, got {self.attack_kind!r}")
        if not (0 < self.train_fraction < 1):
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.manifest is None and not self.groups:
            raise ConfigError("config needs either a dataset manifest or [group:*] sections")


def _parse_floats(text: str) -> list[float]:
    return [float(v.strip()) for v in text.split(",") if v.strip()]


def _parse_band(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    return (float(lo), float(hi))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None

    try:
        kw: dict = {}
        if parser.has_section("dataset"):
            ds = parser["dataset"]
            kw["image_size"] = ds.getint("image_size", 32)
            kw["dataset_seed"] = ds.getint("seed", 0)
            kw["train_fraction"] = ds.getfloat("train_fraction", 0.8)
            kw["split_seed"] = ds.getint("split_seed", 1)
            kw["manifest"] = ds.get("manifest", None)

        groups = {}
        for section in parser.sections():
            if not section.startswith("group:"):
                continue
            name = section.split(":", 1)[1]
            g = parser[section]
            groups[name] = dataset.GroupSpec(
                count=g.getint("count"),
                signal_band=tuple(_parse_floats(g.get("signal_band"))),
                signal_amplitude=g.getfloat("signal_amplitude", 0.10),
                noise_std=g.getfloat("noise_std", 0.005),
                texture_band=tuple(_parse_floats(g.get("texture_band", "0.09, 0.14"))),
                texture_amplitude=g.getfloat("texture_amplitude", 0.05),
            )
        kw["groups"] = groups

        if parser.has_section("sweep"):
            sw = parser["sweep"]
            if sw.get("flks", None):
                kw["flks_values"] = tuple(int(v) for v in _parse_floats(sw.get("flks")))
            kw["seeds_per_setting"] = sw.getint("seeds_per_setting", 3)
            kw["conv2_kernel"] = sw.getint("conv2_kernel", 3)
            kw["sweep_all_kernels"] = sw.getboolean("sweep_all_kernels", False)
            kw["init_variance"] = sw.getfloat("init_variance", 0.02)
            kw["balance_groups"] = sw.getboolean("balance_groups", False)

        if parser.has_section("train"):
            tr = parser["train"]
            kw["hyper"] = nnet.TrainHyper(
                batch_size=tr.getint("batch_size", 32),
                lr=tr.getfloat("lr", 1e-3),
                lr_decay_epochs=tuple(int(v) for v in _parse_floats(tr.get("lr_decay_epochs", "13, 17"))),
                lr_decay_factor=tr.getfloat("lr_decay_factor", 0.1),
                epochs=tr.getint("epochs", 20),
                optimizer=tr.get("optimizer", "adam"),
            )

        if parser.has_section("attack"):
            at = parser["attack"]
            kw["attack_kind"] = at.get("kind", "cw")
            kw["dump_perturbations"] = at.getboolean("dump_perturbations", False)
            kw["attack_params"] = attacks.AttackParams(
                kind="fgsm" if kw["attack_kind"] == "both" else kw["attack_kind"],
                epsilon=at.getfloat("epsilon", 0.1),
                step_size=at.getfloat("step_size", 0.01),
                max_steps=at.getint("max_steps", 20),
                c_tradeoff=at.getfloat("c_tradeoff", 1.0),
                cw_steps=at.getint("cw_steps", 200),
                cw_step_size=at.getfloat("cw_step_size", 0.02),
                confidence_margin=at.getfloat("confidence_margin", 0.0),
            )

        if parser.has_section("inject"):
            inj = parser["inject"]
            kw["inject_frequencies"] = tuple(_parse_floats(inj.get("frequencies", "0.06, 0.10, 0.14, 0.18")))
            kw["inject_delta_width"] = inj.getfloat("delta_width", 2.0)
            kw["inject_delta_gain"] = inj.getfloat("delta_gain", 15.0)

        if parser.has_section("regress"):
            rg = parser["regress"]
            protected = tuple(v.strip() for v in rg.get("protected", "group").split(",") if v.strip())
            kw["protected"] = protected
            controls = tuple(v.strip() for v in rg.get("controls", "").split(",") if v.strip())
            kw["controls"] = controls
            bands_text = rg.get("bands", "")
            if bands_text.strip():
                kw["frequency_bands"] = tuple(_parse_band(b) for b in bands_text.split(",") if b.strip())

        return ExperimentConfig(**kw)
    except (ValueError, TypeError, KeyError, configparser.Error) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid config {path}: {err}") from None


# ---------------------------------------------------------------------------
# Data and model plumbing
# ---------------------------------------------------------------------------


def load_samples(config: ExperimentConfig):
    if config.manifest:
        return dataset.load_manifest(config.manifest)
    spec = dataset.SynthSpec(
        groups=config.groups,
        image_size=config.image_size,
        seed=config.dataset_seed,
    )
    return dataset.generate_synthetic(spec)


def split_samples(config: ExperimentConfig):
    samples = load_samples(config)
    return dataset.split(samples, config.train_fraction, config.split_seed)


def _balance_by_group(samples):
    """Inverse-frequency oversampling: cycle smaller groups up to the max count."""
    by_group: dict[str, list] = {}
    for s in samples:
        by_group.setdefault(str(s.attributes.get("group", "")), []).append(s)
    target = max(len(v) for v in by_group.values())
    out = []
    for key in sorted(by_group):
        members = by_group[key]
        out.extend(members[i % len(members)] for i in range(target))
    return out


def model_config_for(config: ExperimentConfig, flks: int, seed: int, sample) -> nnet.ModelConfig:
    conv2 = flks if config.sweep_all_kernels else config.conv2_kernel
    img = sample.image
    return nnet.ModelConfig(
        layers=nnet.default_architecture(flks, num_categories=2, conv2_kernel=conv2),
        input_dims=(img.channels, img.height, img.width),
        num_categories=2,
        flks=flks,
        init_variance=config.init_variance,
        seed=seed,
    )


def checkpoint_path(out_dir, flks: int, seed: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"flks{flks}_seed{seed}.ckpt"


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    def cell(v) -> str:
        if isinstance(v, float):
            return repr(float(v))  # plain float repr, also for numpy scalars
        if v is None:
            return ""
        return str(v)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(cell(v) for v in row) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def _copy_config(config_path, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.ini"
    source = Path(config_path)
    if not target.exists() or target.read_bytes() != source.read_bytes():
        shutil.copyfile(source, target)


# ---------------------------------------------------------------------------
# train-sweep
# ---------------------------------------------------------------------------


def _train_one(args):
    config, flks, seed, out_dir = args
    train_s, test_s = split_samples(config)
    if config.balance_groups:
        train_s = _balance_by_group(train_s)
    mcfg = model_config_for(config, flks, seed, train_s[0])
    model = nnet.train(nnet.init_model(mcfg), train_s, config.hyper)
    path = checkpoint_path(out_dir, flks, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_checkpoint(model, path)
    table = nnet.evaluate_by_group(model, test_s)
    rows = [(flks, seed, "overall", table.overall.accuracy, table.overall.count)]
    rows += [(flks, seed, g.group, g.accuracy, g.count) for g in table.groups]
    return rows


def cmd_train_sweep(config: ExperimentConfig, out_dir, threads: int = 1) -> list[Path]:
    """Train |flks| x seeds models, checkpoint them, and emit the unperturbed
    per-group accuracy table (averaged over seeds)."""
    tasks = [(config, flks, seed, out_dir) for flks in config.flks_values
             for seed in range(config.seeds_per_setting)]
    if threads > 1:
        import multiprocessing

        with ProcessPoolExecutor(max_workers=threads,
                                 mp_context=multiprocessing.get_context("spawn")) as pool:
            per_task = list(pool.map(_train_one, tasks))
    else:
        per_task = [_train_one(t) for t in tasks]

    by_seed_rows = [row for rows in per_task for row in rows]
    _write_csv(
        Path(out_dir) / "accuracy_unperturbed_by_seed.csv",
        ["flks", "seed", "group", "accuracy", "n"],
        by_seed_rows,
    )
    # seed-averaged table
    acc: dict[tuple[int, str], list] = {}
    counts: dict[tuple[int, str], int] = {}
    for flks, seed, group, accuracy, n in by_seed_rows:
        if accuracy is None:
            continue
        acc.setdefault((flks, group), []).append(accuracy)
        counts[(flks, group)] = n
    rows = []
    for flks in config.flks_values:
        for group in sorted({g for (k, g) in acc if k == flks}):
            values = acc[(flks, group)]
            rows.append([flks, group, float(np.mean(values)), counts[(flks, group)]])
    _write_csv(Path(out_dir) / "accuracy_unperturbed.csv", ["flks", "group", "accuracy", "n"], rows)
    return [checkpoint_path(out_dir, flks, seed) for flks in config.flks_values
            for seed in range(config.seeds_per_setting)]


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------


def _attack_kinds(config: ExperimentConfig) -> list[str]:
    return ["fgsm", "cw"] if config.attack_kind == "both" else [config.attack_kind]


def _params_for(config: ExperimentConfig, kind: str) -> attacks.AttackParams:
    base = config.attack_params
    return attacks.AttackParams(
        kind=kind,
        epsilon=base.epsilon,
        step_size=base.step_size,
        max_steps=base.max_steps,
        c_tradeoff=base.c_tradeoff,
        cw_steps=base.cw_steps,
        cw_step_size=base.cw_step_size,
        confidence_margin=base.confidence_margin,
    )


def _attack_one_model(args):
    config, flks, seed, out_dir = args
    model = nnet.load_checkpoint(checkpoint_path(out_dir, flks, seed))
    _, test_s = split_samples(config)
    rows = []
    deltas: dict[tuple[str, str], list] = {}
    for kind in _attack_kinds(config):
        params = _params_for(config, kind)
        fn = attacks.fgsm_attack if kind == "fgsm" else attacks.cw_attack
        for sample in test_s:
            initially_correct = int(
                np.argmax(nnet.forward(model, sample.image.values[np.newaxis])[0])
            ) == int(sample.category)
            res = fn(model, sample, params)
            power = float(np.sum(res.perturbation.values**2))
            f_half_val = None
            if power > 0:
                spec = imgfreq.dft2(res.perturbation)
                f_half_val = imgfreq.f_half(imgfreq.radial_power(spec))
            group = str(sample.attributes.get("group", ""))
            rows.append([
                sample.id, kind, flks, seed, group,
                int(res.success), res.d_p, res.steps_used,
                f_half_val, int(initially_correct),
            ])
            deltas.setdefault((kind, group), []).append(res.perturbation)
            if config.dump_perturbations:
                dump_dir = Path(out_dir) / "perturbations"
                dump_dir.mkdir(parents=True, exist_ok=True)
                imgfreq.save_grid(
                    dump_dir / f"{kind}_flks{flks}_seed{seed}_{sample.id}.grid",
                    res.perturbation.values[0],
                )
    return rows, deltas


def cmd_attack(config: ExperimentConfig, out_dir, threads: int = 1) -> Path:
    """Run the configured attack(s) on every test sample for every checkpoint.

    Emits per-sample records, seed-pooled and per-seed summaries, and the
    per-(kind, flks, group) mean magnitude spectra with their half-power
    frequencies.
    """
    out_dir = Path(out_dir)
    tasks = [(config, flks, seed, out_dir) for flks in config.flks_values
             for seed in range(config.seeds_per_setting)]
    for flks in config.flks_values:
        for seed in range(config.seeds_per_setting):
            if not checkpoint_path(out_dir, flks, seed).exists():
                raise FileNotFoundError(
                    f"checkpoint {checkpoint_path(out_dir, flks, seed)} missing; run train-sweep first"
                )
    if threads > 1:
        import multiprocessing

        with ProcessPoolExecutor(max_workers=threads,
                                 mp_context=multiprocessing.get_context("spawn")) as pool:
            results = list(pool.map(_attack_one_model, tasks))
    else:
        results = [_attack_one_model(t) for t in tasks]

    all_rows = [row for rows, _ in results for row in rows]
    header = ["sample_id", "attack_kind", "flks", "seed", "subgroup",
              "success", "d_p", "steps_used", "f_half", "initially_correct"]
    _write_csv(out_dir / "attack_records.csv", header, all_rows)

    # pooled mean magnitude spectra per (kind, flks, group); failures included
    spectra_dir = out_dir / "spectra"
    spectra_dir.mkdir(parents=True, exist_ok=True)
    pooled_deltas: dict[tuple[str, int, str], list] = {}
    for (task, (rows, deltas)) in zip(tasks, results):
        flks = task[1]
        for (kind, group), d in deltas.items():
            pooled_deltas.setdefault((kind, flks, group), []).extend(d)
    mean_spec_f_half: dict[tuple[str, int, str], float | None] = {}
    for (kind, flks, group), d in sorted(pooled_deltas.items()):
        nonempty = [img for img in d if np.any(img.values)]
        if not nonempty:
            mean_spec_f_half[(kind, flks, group)] = None
            continue
        mean = imgfreq.mean_magnitude_spectrum(d)
        stem = f"mean_spec_{kind}_flks{flks}_{group}"
        imgfreq.save_grid(spectra_dir / f"{stem}.grid", mean)
        imgfreq.save_grid_csv(spectra_dir / f"{stem}.csv", mean)
        imgfreq.save_grid_csv(spectra_dir / f"{stem}_log.csv", np.log1p(mean))
        profile = imgfreq.radial_power(imgfreq.Spectrum(mean.astype(np.complex128)))
        mean_spec_f_half[(kind, flks, group)] = imgfreq.f_half(profile)

    def summarize(rows, keyfn):
        summary: dict[tuple, dict] = {}
        for row in rows:
            key = keyfn(row)
            entry = summary.setdefault(key, {"dp_all": [], "dp_ok": [], "fh_ok": [], "n": 0, "ok": 0})
            entry["n"] += 1
            entry["dp_all"].append(row[6])
            if row[5]:
                entry["ok"] += 1
                entry["dp_ok"].append(row[6])
                if row[8] is not None:
                    entry["fh_ok"].append(row[8])
        return summary

    def quantiles(values):
        if not values:
            return (None, None, None)
        q15, q50, q85 = np.percentile(values, [15, 50, 85])
        return (float(q50), float(q15), float(q85))

    def summary_rows(summary, with_seed: bool):
        out_rows = []
        for key in sorted(summary, key=str):
            e = summary[key]
            med_all, q15_all, q85_all = quantiles(e["dp_all"])
            med_ok, q15_ok, q85_ok = quantiles(e["dp_ok"])
            fh_med = float(np.median(e["fh_ok"])) if e["fh_ok"] else None
            if with_seed:
                kind, flks, seed, group = key
                prefix = [kind, flks, seed, group]
                spec_fh = None
            else:
                kind, flks, group = key
                prefix = [kind, flks, group]
                spec_fh = mean_spec_f_half.get((kind, flks, group))
            row = prefix + [
                e["n"], e["ok"] / e["n"],
                med_all, q15_all, q85_all,
                med_ok, q15_ok, q85_ok,
                fh_med,
            ]
            if not with_seed:
                row.append(spec_fh)
            out_rows.append(row)
        return out_rows

    pooled = summarize(all_rows, lambda r: (r[1], r[2], r[4]))
    _write_csv(
        out_dir / "attack_summary.csv",
        ["attack_kind", "flks", "group", "n", "success_rate",
         "median_dp", "q15_dp", "q85_dp",
         "median_dp_success", "q15_dp_success", "q85_dp_success",
         "f_half_median", "f_half_mean_spectrum"],
        summary_rows(pooled, with_seed=False),
    )
    by_seed = summarize(all_rows, lambda r: (r[1], r[2], r[3], r[4]))
    _write_csv(
        out_dir / "attack_summary_by_seed.csv",
        ["attack_kind", "flks", "seed", "group", "n", "success_rate",
         "median_dp", "q15_dp", "q85_dp",
         "median_dp_success", "q15_dp_success", "q85_dp_success",
         "f_half_median"],
        summary_rows(by_seed, with_seed=True),
    )
    return out_dir / "attack_records.csv"


# ---------------------------------------------------------------------------
# inject-sweep
# ---------------------------------------------------------------------------


def cmd_inject_sweep(config: ExperimentConfig, out_dir, threads: int = 1) -> Path:
    """Evaluate every checkpoint on annulus-injected test sets, one per
    configured frequency; emits per-sample error records and accuracy tables."""
    out_dir = Path(out_dir)
    _, test_s = split_samples(config)
    size = max(test_s[0].image.height, test_s[0].image.width)

    injected_sets = {}
    flagged: dict[float, bool] = {}
    for freq in config.inject_frequencies:
        r0 = freq * size
        images = []
        empty = False
        for s in test_s:
            res = imgfreq.inject_energy(s.image, r0, config.inject_delta_width, config.inject_delta_gain)
            empty = empty or res.annulus_empty
            images.append(res.image.values)
        injected_sets[freq] = np.stack(images)
        flagged[freq] = empty

    labels = np.array([s.category for s in test_s], dtype=np.intp)
    groups = [str(s.attributes.get("group", "")) for s in test_s]
    record_rows = []
    acc_rows = []
    for flks in config.flks_values:
        for seed in range(config.seeds_per_setting):
            path = checkpoint_path(out_dir, flks, seed)
            if not path.exists():
                raise FileNotFoundError(f"checkpoint {path} missing; run train-sweep first")
            model = nnet.load_checkpoint(path)
            for freq in config.inject_frequencies:
                preds = nnet.predict(model, injected_sets[freq])
                errors = (preds != labels).astype(int)
                for s, err in zip(test_s, errors):
                    record_rows.append([
                        s.id, flks, seed, str(s.attributes.get("group", "")),
                        freq, int(err),
                    ])
                for group in sorted(set(groups)):
                    members = [i for i, g in enumerate(groups) if g == group]
                    correct = sum(1 - errors[i] for i in members)
                    acc_rows.append([
                        flks, seed, group, freq,
                        correct / len(members), len(members), int(flagged[freq]),
                    ])

    _write_csv(
        out_dir / "inject_records.csv",
        ["sample_id", "flks", "seed", "group", "frequency", "error"],
        record_rows,
    )
    _write_csv(
        out_dir / "inject_accuracy_by_seed.csv",
        ["flks", "seed", "group", "frequency", "accuracy", "n", "flagged"],
        acc_rows,
    )
    pooled: dict[tuple, list] = {}
    meta: dict[tuple, tuple] = {}
    for flks, seed, group, freq, accuracy, n, flag in acc_rows:
        pooled.setdefault((flks, group, freq), []).append(accuracy)
        meta[(flks, group, freq)] = (n, flag)
    rows = [
        [flks, group, freq, float(np.mean(v)), meta[(flks, group, freq)][0], meta[(flks, group, freq)][1]]
        for (flks, group, freq), v in sorted(pooled.items(), key=lambda kv: str(kv[0]))
    ]
    _write_csv(
        out_dir / "inject_accuracy.csv",
        ["flks", "group", "frequency", "accuracy", "n", "flagged"],
        rows,
    )
    return out_dir / "inject_records.csv"


# ---------------------------------------------------------------------------
# regress
# ---------------------------------------------------------------------------


def _band_label(bands, freq: float) -> str | None:
    for i, (lo, hi) in enumerate(bands, start=1):
        if lo <= freq <= hi:
            return f"band{i}"
    return None


def records_from_attack_csv(path, success_only: bool) -> list[RunRecord]:
    header, rows = read_csv(path)
    col = {name: i for i, name in enumerate(header)}
    out = []
    for row in rows:
        if success_only and row[col["success"]] != "1":
            continue
        out.append(
            RunRecord(
                sample_id=row[col["sample_id"]],
                flks=int(row[col["flks"]]),
                seed=int(row[col["seed"]]),
                subgroup={"group": row[col["subgroup"]]},
                descriptor=row[col["attack_kind"]],
                y=float(row[col["d_p"]]),
            )
        )
    return out


def records_from_inject_csv(path) -> list[RunRecord]:
    header, rows = read_csv(path)
    col = {name: i for i, name in enumerate(header)}
    return [
        RunRecord(
            sample_id=row[col["sample_id"]],
            flks=int(row[col["flks"]]),
            seed=int(row[col["seed"]]),
            subgroup={"group": row[col["group"]]},
            descriptor=row[col["frequency"]],
            y=float(row[col["error"]]),
        )
        for row in rows
    ]


def _fit_and_write(observations, protected, controls, out_stem: Path):
    design = causal.build_design(observations, protected=protected, controls=controls)
    fit = causal.ols_fit(design)
    coef_rows = [
        [name, float(fit.beta_hat[i]), float(fit.std_err[i]), float(fit.t_stat[i]), float(fit.p_value[i])]
        for i, name in enumerate(fit.column_names)
    ]
    _write_csv(out_stem.with_name(out_stem.name + "_coef.csv"),
               ["coef_name", "coef_value", "std_err", "t", "p"], coef_rows)
    beta_names = [n for n in fit.column_names if n.startswith("beta_")]
    ftest_rows = []
    for i, a in enumerate(beta_names):
        for b in beta_names[i + 1:]:
            res = causal.pairwise_f_test(fit, a, b)
            ftest_rows.append([res.hypothesis, res.f_stat, res.df_num, res.df_den, res.p_value])
    _write_csv(out_stem.with_name(out_stem.name + "_ftests.csv"),
               ["hypothesis", "f", "df_num", "df_den", "p"], ftest_rows)
    return fit


def cmd_regress(config: ExperimentConfig, out_dir, mode: str = "all") -> list[Path]:
    """Fit the interaction regressions from per-sample run records.

    distance mode: y = d_p from attack records (filtered and unfiltered
    variants side by side). error_rate mode: y = per-image 0/1 error from
    injection records, protected = group x frequency-band.
    """
    out_dir = Path(out_dir)
    regress_dir = out_dir / "regress"
    regress_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def observations_from(records: list[RunRecord], extra_attr=None) -> list[causal.Observation]:
        obs = []
        for r in records:
            attrs = dict(r.subgroup)
            attrs["seed"] = f"s{r.seed}"
            if extra_attr is not None:
                value = extra_attr(r)
                if value is None:
                    continue
                attrs["freq_band"] = value
            obs.append(causal.Observation(x=float(r.flks), y=r.y, attributes=attrs))
        return obs

    if mode in ("all", "distance"):
        path = out_dir / "attack_records.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run the attack command first")
        for label, success_only in (("unfiltered", False), ("filtered", True)):
            records = records_from_attack_csv(path, success_only=success_only)
            obs = observations_from(records)
            fit = _fit_and_write(obs, config.protected, config.controls,
                                 regress_dir / f"distance_{label}")
            written.append(regress_dir / f"distance_{label}_coef.csv")
            if config.controls:
                base = causal.ols_fit(causal.build_design(obs, protected=config.protected))
                shared = [n for n in base.column_names if n.startswith("beta_")]
                res = causal.spec_comparison_test(base, fit, shared)
                _write_csv(regress_dir / f"distance_{label}_spec_compare.csv",
                           ["hypothesis", "f", "df_num", "df_den", "p"],
                           [[res.hypothesis, res.f_stat, res.df_num, res.df_den, res.p_value]])

    if mode in ("all", "error_rate"):
        path = out_dir / "inject_records.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run the inject-sweep command first")
        records = records_from_inject_csv(path)
        obs = observations_from(
            records, extra_attr=lambda r: _band_label(config.frequency_bands, float(r.descriptor))
        )
        if obs:
            protected = tuple(config.protected) + ("freq_band",)
            _fit_and_write(obs, protected, config.controls, regress_dir / "error_rate")
            written.append(regress_dir / "error_rate_coef.csv")
    return written


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _csv_section(path) -> list[dict] | None:
    if not Path(path).exists():
        return None
    header, rows = read_csv(path)

    def convert(v: str):
        if v == "":
            return None
        try:
            return int(v)
        except ValueError:
            pass
        try:
            return float(v)
        except ValueError:
            return v

    return [{k: convert(v) for k, v in zip(header, row)} for row in rows]


def cmd_report(out_dir, config_path=None) -> Path:
    """Aggregate all command outputs into a single versioned JSON report."""
    out_dir = Path(out_dir)
    gaps = []
    sections: dict = {}

    config_file = Path(config_path) if config_path else out_dir / "config.ini"
    if config_file.exists():
        sections["config_sha256"] = hashlib.sha256(config_file.read_bytes()).hexdigest()
    else:
        gaps.append("config")

    for name, path in [
        ("accuracy_unperturbed", out_dir / "accuracy_unperturbed.csv"),
        ("attack_summary", out_dir / "attack_summary.csv"),
        ("inject_accuracy", out_dir / "inject_accuracy.csv"),
        ("regress_distance_unfiltered", out_dir / "regress" / "distance_unfiltered_coef.csv"),
        ("regress_distance_filtered", out_dir / "regress" / "distance_filtered_coef.csv"),
        ("regress_error_rate", out_dir / "regress" / "error_rate_coef.csv"),
        ("ftests_distance_unfiltered", out_dir / "regress" / "distance_unfiltered_ftests.csv"),
        ("ftests_distance_filtered", out_dir / "regress" / "distance_filtered_ftests.csv"),
        ("ftests_error_rate", out_dir / "regress" / "error_rate_ftests.csv"),
    ]:
        section = _csv_section(path)
        if section is None:
            gaps.append(name)
        else:
            sections[name] = section

    report = {"schema": "REPORT v1", "sections": sections, "gaps": sorted(gaps)}
    path = out_dir / "report.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernelbias",
        description="Kernel-size bias audit pipeline: train a sweep of CNNs, perturb "
                    "the test set, and fit causal interaction regressions.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("train-sweep", "attack", "inject-sweep", "regress", "report"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=(verb != "report"), help="experiment config (INI)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        if verb == "regress":
            p.add_argument("--mode", choices=("distance", "error_rate", "all"), default="all")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            cmd_report(args.out, config_path=args.config)
            return EXIT_OK
        config = load_config(args.config)
        _copy_config(args.config, args.out)
        if args.verb == "train-sweep":
            cmd_train_sweep(config, args.out, threads=args.threads)
        elif args.verb == "attack":
            cmd_attack(config, args.out, threads=args.threads)
        elif args.verb == "inject-sweep":
            cmd_inject_sweep(config, args.out, threads=args.threads)
        elif args.verb == "regress":
            cmd_regress(config, args.out, mode=args.mode)
        return EXIT_OK
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # runtime failures map to exit code 3
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
