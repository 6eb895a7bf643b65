"""End-to-end runs: supervised training of T, per-observation fitting of S,
speedup comparison and a summary report.

Directory layout under ``cfg.out``::

    config.cfg
    supervised/            T.ckpt trace.csv trace.svg manifest.json [heldout.csv]
    unsupervised/<mode>-<k>/  S.ckpt trace.csv trace.svg metrics.csv manifest.json
                              gaussian: stats.csv cov.csv   image: mean/std .csv .svg
    compare/               speedup.csv medians.csv traces.svg
    report.md

Problem data (operator, corpus, observations) is seeded by
``cfg.problem_seed`` and the observation index; training streams by
``cfg.seed`` mixed with a hash of (mode, index).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError
from ..flows import ConditionalFlow, derive_seed, init_cond_flow
from ..objectives import FlowPrior, GaussianPrior, LossTrace, TrainConfig, make_log_posterior, train
from ..problems import (
    analytic_posterior,
    image_corpus,
    log_evidence,
    make_image_problems,
    make_shifted_problem,
    make_supervised_gaussian,
    sample_joint,
    synth_layered_image,
)
from ..transfer import make_preconditioned, scratch_baseline, warm_start
from .analysis import PosteriorSamples, posterior_stats, psnr, relative_l2, smoothed, compare_speedup
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, format_config
from .emit import (
    emit_csv,
    emit_image_svg,
    emit_matrix_csv,
    emit_svg,
    emit_table_csv,
    read_trace_csv,
)

N_HELDOUT = 5
_SAMPLE_CHUNK = 2048


def run_seed(base: int, mode: str, index: int) -> int:
    """Per-run stream seed ``base XOR hash(mode, index)`` (64-bit)."""
    h = hashlib.sha256(f"{mode}/{index}".encode()).digest()
    return (int(base) ^ int.from_bytes(h[:8], "little")) & (2 ** 64 - 1)


def _mkdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_config(cfg: ExperimentConfig, directory) -> None:
    with open(os.path.join(_mkdir(directory), "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


class Experiment:
    """Problem objects and seeded data for one configuration."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        ps = cfg.problem_seed
        if cfg.problem == "gaussian":
            self.supervised = make_supervised_gaussian(ps, cfg.nx, cfg.ny)
            self.shifted_law, self.unsupervised = make_shifted_problem(self.supervised)
            self.nx, self.ny = cfg.nx, cfg.ny
        else:
            self.supervised, self.unsupervised = make_image_problems(cfg.image_side, ps, cfg.sensing_rate)
            self.nx = self.ny = cfg.image_side ** 2

    def training_pairs(self):
        cfg, ps = self.cfg, self.cfg.problem_seed
        if cfg.problem == "gaussian":
            return sample_joint(self.supervised, None, cfg.n_pairs, derive_seed(ps, 1))
        X = image_corpus(cfg.image_side, cfg.n_images, ps, "train")
        rng = np.random.default_rng(derive_seed(ps, 4))
        noise = np.sqrt(self.supervised.noise_var) * rng.standard_normal(X.shape)
        return X, self.supervised.forward(X) + self.supervised.noise_mean + noise

    def heldout(self):
        """Held-out ``(x, y)`` pairs from the supervised joint law."""
        return sample_joint(self.supervised, None, N_HELDOUT, derive_seed(self.cfg.problem_seed, 5))

    def observation(self, index: int):
        """``(x_true, y')`` for observation ``index``; independent of mode and base seed."""
        ps = self.cfg.problem_seed
        if self.cfg.problem == "gaussian":
            X, Y = sample_joint(self.unsupervised, self.shifted_law, 1, derive_seed(ps, 2, index))
            return X[0], Y[0]
        x = synth_layered_image(self.cfg.image_side, derive_seed(ps, 1, index))
        return x, self.unsupervised.observe(x, derive_seed(ps, 3, index))

    def target(self, T: ConditionalFlow, y_obs):
        p = self.unsupervised
        if self.cfg.problem == "gaussian":
            return make_log_posterior(p, GaussianPrior(p.prior_mean, p.prior_cov), y_obs)
        return make_log_posterior(p, FlowPrior(T, y_obs), y_obs)


def _train_config(cfg: ExperimentConfig, phase: str, seed: int, mode: str) -> TrainConfig:
    get = lambda k: getattr(cfg, f"{phase}_{k}")
    objective = "forward-kl" if phase == "sup" else "reverse-kl"
    return TrainConfig(objective, get("iterations"), get("batch"), seed, get("lr"), get("schedule"),
                       get("final_lr_fraction"), weight_decay=get("weight_decay"), mode=mode)


def _emit_trace(trace: LossTrace, directory, title: str) -> None:
    emit_csv(trace, os.path.join(directory, "trace.csv"))
    emit_svg(trace, os.path.join(directory, "trace.svg"), title=title)


def _train_or_save_partial(cfg_train, model, source, directory, title):
    try:
        return train(cfg_train, model, source)
    except NumericError as err:
        if err.partial is not None:
            _emit_trace(err.partial, directory, title + " (aborted)")
        raise


@dataclass
class SupervisedResult:
    T: ConditionalFlow
    trace: LossTrace
    checkpoint: str
    digest: str


def run_supervised(cfg: ExperimentConfig) -> SupervisedResult:
    """Train the amortised conditional flow T by forward KL."""
    exp = Experiment(cfg)
    directory = _mkdir(os.path.join(cfg.out, "supervised"))
    write_config(cfg, cfg.out)
    write_config(cfg, directory)
    seed = run_seed(cfg.seed, "supervised", 0)
    T = init_cond_flow(exp.nx, exp.ny, cfg.n_layers, cfg.hidden_widths, cfg.clamp, seed)
    T, trace = _train_or_save_partial(_train_config(cfg, "sup", seed, "supervised"), T,
                                      exp.training_pairs(), directory, "supervised forward KL")
    _emit_trace(trace, directory, "supervised forward KL")
    path = os.path.join(directory, "T.ckpt")
    digest = save_checkpoint(T, path)
    manifest = {"checkpoint": "T.ckpt", "checkpoint_sha256": digest, "seed": seed,
                "iterations": trace.iterations, "problem": cfg.problem}
    if cfg.problem == "gaussian":
        rows = heldout_errors(exp, T, cfg.n_samples, derive_seed(seed, 3))
        emit_table_csv(["index", "mean_rel_err", "cov_rel_err"], rows, os.path.join(directory, "heldout.csv"))
    _write_json(manifest, os.path.join(directory, "manifest.json"))
    _write_json({"wall_clock_seconds": trace.wall_clock}, os.path.join(directory, "timing.json"))
    return SupervisedResult(T, trace, path, digest)


def _draw(sampler_fn, m: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    xs, lds = [], []
    for start in range(0, m, _SAMPLE_CHUNK):
        z = rng.standard_normal((min(_SAMPLE_CHUNK, m - start), dim))
        x, ld = sampler_fn(z)
        xs.append(x)
        lds.append(ld)
    return np.concatenate(xs), np.concatenate(lds)


def heldout_errors(exp: Experiment, T: ConditionalFlow, m: int, seed: int):
    """Conditional-sample moments of T vs the supervised analytic posterior."""
    _, Y = exp.heldout()
    rows = []
    for k, y in enumerate(Y):
        mean, cov = analytic_posterior(exp.supervised, y)
        xs, _ = _draw(lambda z: (T.sample(y, z), np.zeros(len(z))), m, exp.nx, derive_seed(seed, k))
        stats = posterior_stats(xs)
        rows.append([k, relative_l2(stats.mean, mean), relative_l2(stats.cov, cov)])
    return rows


def load_supervised(cfg: ExperimentConfig, path=None) -> SupervisedResult:
    exp = Experiment(cfg)
    path = path or os.path.join(cfg.out, "supervised", "T.ckpt")
    T = load_checkpoint(path, dims=(exp.nx, exp.ny))
    if not isinstance(T, ConditionalFlow):
        raise ConfigError(f"{path} does not hold a conditional flow")
    return SupervisedResult(T, LossTrace(), path, file_digest(path))


@dataclass
class UnsupervisedResult:
    S: object
    trace: LossTrace
    samples: PosteriorSamples
    metrics: dict
    directory: str


def make_sampler(mode: str, T: ConditionalFlow, y_obs, seed: int):
    if mode == "warm":
        return warm_start(T, y_obs)
    if mode == "precond":
        return make_preconditioned(T, y_obs, seed=seed)
    if mode == "scratch":
        return scratch_baseline(T, y_obs, seed)
    raise ConfigError(f"unknown init mode {mode!r}")


def run_unsupervised(cfg: ExperimentConfig, sup: SupervisedResult, mode: str, index: int) -> UnsupervisedResult:
    """Fit a sampler for observation ``index`` by reverse KL from init ``mode``."""
    exp = Experiment(cfg)
    directory = _mkdir(os.path.join(cfg.out, "unsupervised", f"{mode}-{index}"))
    write_config(cfg, directory)
    seed = run_seed(cfg.seed, mode, index)
    x_true, y_obs = exp.observation(index)
    target = exp.target(sup.T, y_obs)
    S = make_sampler(mode, sup.T, y_obs, seed)
    title = f"reverse KL, {mode}, observation {index}"
    S, trace = _train_or_save_partial(_train_config(cfg, "unsup", seed, mode), S, target, directory, title)
    _emit_trace(trace, directory, title)
    digest = save_checkpoint(S, os.path.join(directory, "S.ckpt"))

    xs, lds = _draw(S.sample, cfg.n_samples, exp.nx, derive_seed(seed, 2))
    stats = posterior_stats(xs)
    terms = -target(xs)[0] - lds
    metrics = {"loss_estimate": float(terms.mean()),
               "loss_estimate_se": float(terms.std(ddof=1) / np.sqrt(terms.size))}
    if trace.iterations >= cfg.window:
        window = np.asarray(trace.values[-cfg.window:])
        metrics["final_window_loss"] = float(window.mean())
        metrics["final_window_se"] = float(window.std(ddof=1) / np.sqrt(cfg.window))
        metrics["initial_window_loss"] = float(smoothed(trace.values, cfg.window)[0])
    if cfg.problem == "gaussian":
        mean, cov = analytic_posterior(exp.unsupervised, y_obs)
        d = exp.nx
        neg_log_z = -log_evidence(exp.unsupervised, y_obs)
        metrics.update(mean_rel_err=relative_l2(stats.mean, mean), cov_rel_err=relative_l2(stats.cov, cov),
                       neg_log_evidence=neg_log_z,
                       loss_bound=neg_log_z + 0.5 * d * (1.0 + np.log(2.0 * np.pi)))
        rows = [[i, stats.mean[i], stats.std[i], mean[i], np.sqrt(cov[i, i])] for i in range(d)]
        emit_table_csv(["index", "mean", "std", "analytic_mean", "analytic_std"], rows,
                       os.path.join(directory, "stats.csv"))
        emit_matrix_csv(stats.cov, os.path.join(directory, "cov.csv"))
    else:
        side = cfg.image_side
        metrics.update(psnr=psnr(stats.mean, x_true), std_min=float(stats.std.min()))
        for name, img in (("mean", stats.mean), ("std", stats.std), ("truth", x_true)):
            grid = img.reshape(side, side)
            emit_matrix_csv(grid, os.path.join(directory, f"{name}.csv"))
            emit_image_svg(grid, os.path.join(directory, f"{name}.svg"), title=f"{name}, {mode} {index}")
    emit_table_csv(["metric", "value"], sorted(metrics.items()), os.path.join(directory, "metrics.csv"))
    _write_json({"mode": mode, "observation_index": index, "seed": seed, "iterations": trace.iterations,
                 "checkpoint": "S.ckpt", "checkpoint_sha256": digest,
                 "supervised_checkpoint_sha256": sup.digest}, os.path.join(directory, "manifest.json"))
    _write_json({"wall_clock_seconds": trace.wall_clock}, os.path.join(directory, "timing.json"))
    return UnsupervisedResult(S, trace, stats, metrics, directory)


def _run_dirs(out):
    root = os.path.join(out, "unsupervised")
    if not os.path.isdir(root):
        raise ConfigError(f"no unsupervised runs under {out}")
    for name in sorted(os.listdir(root)):
        mode, _, idx = name.rpartition("-")
        if mode and idx.isdigit() and os.path.exists(os.path.join(root, name, "trace.csv")):
            yield mode, int(idx), os.path.join(root, name)


def run_compare(cfg: ExperimentConfig):
    """Speedup table over all finished unsupervised runs in ``cfg.out``."""
    traces, loss_traces = {}, []
    for mode, idx, path in _run_dirs(cfg.out):
        values, _, seed = read_trace_csv(os.path.join(path, "trace.csv"))
        traces[(mode, idx)] = values
        loss_traces.append(LossTrace(values, seed, mode))
    rows, medians = compare_speedup(traces, cfg.window)
    directory = _mkdir(os.path.join(cfg.out, "compare"))
    write_config(cfg, directory)
    emit_table_csv(["mode", "seed", "iters_to_threshold", "ratio", "initial_loss", "final_loss"],
                   [[r.mode, r.seed, "" if r.iters_to_threshold is None else r.iters_to_threshold,
                     r.ratio, r.initial_loss, r.final_loss] for r in rows],
                   os.path.join(directory, "speedup.csv"))
    emit_table_csv(["mode", "median_ratio"], sorted(medians.items()), os.path.join(directory, "medians.csv"))
    labels = [f"{m}-{i}" for (m, i) in traces]
    emit_svg(loss_traces, os.path.join(directory, "traces.svg"), labels=labels, title="reverse-KL loss by init mode")
    return rows, medians


def _read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()[1:]
    return dict((k, float(v)) for k, v in (line.split(",") for line in lines))


def run_report(cfg: ExperimentConfig) -> str:
    """Markdown summary of everything found in ``cfg.out``; returns its path."""
    lines = [f"# Report: {cfg.problem} problem", ""]
    manifest = os.path.join(cfg.out, "supervised", "manifest.json")
    if os.path.exists(manifest):
        with open(manifest, encoding="utf-8") as fh:
            info = json.load(fh)
        lines += [f"Supervised checkpoint `T.ckpt` sha256 `{info['checkpoint_sha256']}`, "
                  f"{info['iterations']} iterations.", ""]
    heldout = os.path.join(cfg.out, "supervised", "heldout.csv")
    if os.path.exists(heldout):
        lines += ["## Held-out amortised posterior", "", "| index | mean rel. err | cov rel. err |", "|---|---|---|"]
        with open(heldout, encoding="utf-8") as fh:
            for row in fh.read().splitlines()[1:]:
                k, me, ce = row.split(",")
                lines.append(f"| {k} | {float(me):.4f} | {float(ce):.4f} |")
        lines.append("")
    runs = list(_run_dirs(cfg.out)) if os.path.isdir(os.path.join(cfg.out, "unsupervised")) else []
    if runs:
        keys = sorted({k for _, _, p in runs for k in _read_metrics(os.path.join(p, "metrics.csv"))})
        lines += ["## Per-observation runs", "", "| run | " + " | ".join(keys) + " |",
                  "|---|" + "---|" * len(keys)]
        for mode, idx, path in runs:
            m = _read_metrics(os.path.join(path, "metrics.csv"))
            lines.append(f"| {mode}-{idx} | " + " | ".join(f"{m[k]:.4f}" if k in m else "" for k in keys) + " |")
        lines.append("")
    medians = os.path.join(cfg.out, "compare", "medians.csv")
    if os.path.exists(medians):
        lines += ["## Median iterations-to-threshold ratio (vs scratch)", ""]
        with open(medians, encoding="utf-8") as fh:
            for row in fh.read().splitlines()[1:]:
                mode, val = row.split(",")
                lines.append(f"- {mode}: {float(val):.3f}")
        lines.append("")
    path = os.path.join(_mkdir(cfg.out), "report.md")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return path


def run_experiment(cfg: ExperimentConfig, sup: SupervisedResult | None = None):
    """Supervised phase (unless ``sup`` is given), every (mode, index) run,
    then the comparison (when scratch and another mode ran) and the report."""
    cfg.validate()
    write_config(cfg, cfg.out)
    sup = sup or run_supervised(cfg)
    results = {}
    for index in cfg.seeds:
        for mode in cfg.modes:
            results[(mode, index)] = run_unsupervised(cfg, sup, mode, index)
    comparison = None
    if "scratch" in cfg.modes and len(cfg.modes) > 1 and cfg.unsup_iterations >= cfg.window:
        comparison = run_compare(cfg)
    run_report(cfg)
    return sup, results, comparison
