"""Pipeline stages behind the command-line interface.

Every stage reads its inputs from files and writes its outputs under the run's
output directory, so any stage can be rerun on its own. Each command also
writes ``manifest_<command>.json`` holding the resolved configuration, its
digest, seeds, the package version and a SHA-256 of every input and output
file; it carries no timestamps, so identical reruns give identical manifests.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analog import DistanceCache, build_distance_cache
from .config import RunConfig, dump_config
from .dimred import ForcingCoefficients, compute_eofs, precompute_le_grid
from .errors import InsufficientHistoryError, StageError
from .evaluation import Grids, climatology, evaluate, persistence
from .fields import (
    CountField,
    ForcingField,
    align,
    anomalize,
    load_count_field,
    load_forcing_field,
    write_locations,
)
from .nmf import Factorization, fit_offset_nmf, nnsvd_init
from .sampler import AnalogModel, ChainOutput, forecast, run_sampler

log = logging.getLogger(__name__)

FORECAST_STREAM = 7919  # separates forecast randomness from chain randomness


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is re-raised with its stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_table(path, table, header: str, fmt="%.17g") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(table) if np.ndim(table) else table, fmt=fmt,
               header=header, comments="# ")


def read_table(path) -> np.ndarray:
    return np.loadtxt(path, comments="#", ndmin=2)


# ---------------------------------------------------------------------------
# data preparation


@dataclass(eq=False)
class Prepared:
    counts: CountField
    forcing: ForcingField  # anomalies
    train: np.ndarray  # response indices used for fitting
    targets: np.ndarray  # response indices to forecast (may include counts.T)
    anchors: dict  # response index -> aligned forcing index


def _usable(t, cfg, counts, forcing) -> int | None:
    try:
        return align(t, cfg.alignment, forcing, counts, int(cfg.hyper.q_max))
    except InsufficientHistoryError:
        return None


def prepare(cfg: RunConfig) -> Prepared:
    with stage("load"):
        counts = load_count_field(cfg.counts)
        forcing = load_forcing_field(cfg.forcing)
    with stage("anomalize"):
        anomalies = anomalize(forcing, cfg.anomaly.ref_start, cfg.anomaly.ref_end)
    with stage("align"):
        anchors = {}
        for t in range(counts.T + 1):
            a = _usable(t, cfg, counts, anomalies)
            if a is not None:
                anchors[t] = a
        if cfg.holdout:
            targets = [counts.index_of_year(y) for y in cfg.holdout]
            for y, t in zip(cfg.holdout, targets):
                if t not in anchors:
                    raise InsufficientHistoryError(
                        f"holdout year {y} lacks q_max={cfg.hyper.q_max} forcing steps"
                    )
        else:
            if counts.T not in anchors:
                raise InsufficientHistoryError(
                    "forcing does not reach the anchor of the period after the record; "
                    "set a holdout year instead"
                )
            targets = [counts.T]
        first = min(targets)
        train = [
            t for t in range(counts.T)
            if t in anchors and t not in targets and not (cfg.train_before_holdout and t > first)
        ]
        if len(train) < 2:
            raise ValueError(f"only {len(train)} training periods have enough forcing history")
    return Prepared(counts, anomalies, np.array(train), np.array(targets), anchors)


def cache_key(cfg: RunConfig, prep: Prepared) -> str:
    h = hashlib.sha256()
    parts = {
        "method": cfg.method,
        "n_alpha": cfg.n_alpha,
        "q": [int(cfg.hyper.q_min), int(cfg.hyper.q_max)],
        "k_nn": list(cfg.hyper.k_nn_grid) if cfg.method == "le" else None,
        "rotation_only": cfg.rotation_only,
        "alignment": [cfg.alignment.tau, cfg.alignment.anchor_offset],
        "anomaly": [cfg.anomaly.ref_start, cfg.anomaly.ref_end],
        "indices": sorted(int(t) for t in np.concatenate([prep.train, prep.targets])),
    }
    h.update(json.dumps(parts, sort_keys=True).encode())
    h.update(np.ascontiguousarray(prep.forcing.values).tobytes())
    return h.hexdigest()[:16]


def reduce_forcing(cfg: RunConfig, prep: Prepared, out: Path):
    with stage("dimred"):
        d = out / "coeffs"
        d.mkdir(parents=True, exist_ok=True)
        x = prep.forcing.values
        if cfg.method == "eof":
            phi, coeffs, var = compute_eofs(x, cfg.n_alpha)
            coeffs.save(d / "eof.npz")
            write_table(d / "eof_patterns.txt", phi, "EOF spatial patterns, one column per EOF")
            write_table(d / "variance_explained.txt", var[None, :], "fraction per EOF")
            return coeffs, {}
        grid = precompute_le_grid(x, cfg.n_alpha, cfg.hyper.k_nn_grid)
        ok = {k: v for k, v in grid.items() if isinstance(v, ForcingCoefficients)}
        failed = {k: str(v) for k, v in grid.items() if k not in ok}
        if not ok:
            raise ValueError(f"no Laplacian eigenmap succeeded: {failed}")
        for k, c in ok.items():
            c.save(d / f"le_k{k}.npz")
        return ok, failed


def load_or_build_cache(cfg: RunConfig, prep: Prepared, coeffs, rebuild: bool) -> tuple:
    with stage("cache"):
        key = cache_key(cfg, prep)
        path = cfg.cache_dir / f"distances_{cfg.method}_{key}.npz"
        if path.exists() and not rebuild:
            return DistanceCache.load(path), path
        idx = np.array(sorted(int(t) for t in np.concatenate([prep.train, prep.targets])))
        cache = build_distance_cache(
            coeffs, idx, [prep.anchors[int(t)] for t in idx],
            np.arange(cfg.hyper.q_min, cfg.hyper.q_max + 1),
            rotation_only=cfg.rotation_only,
        )
        cfg.cache_dir.mkdir(parents=True, exist_ok=True)
        cache.save(path)
        return cache, path


# ---------------------------------------------------------------------------
# chains


def _chain_worker(args):
    model, b0, settings, seed = args
    return run_sampler(model, b0, settings, seed)


def run_chains(model, b0, settings, seed: int, chains: int) -> list:
    seeds = [(int(seed), i) for i in range(chains)]
    jobs = [(model, b0, settings, s) for s in seeds]
    if chains == 1:
        return [_chain_worker(jobs[0])]
    with ProcessPoolExecutor(max_workers=chains) as pool:
        return list(pool.map(_chain_worker, jobs))


TRACE_HEADER = "m q theta1 sigma2_eta k_nn log_posterior"


def save_chain(out: ChainOutput, d: Path, i: int) -> None:
    write_table(d / f"chain{i}_trace.txt", out.trace_table(), TRACE_HEADER)
    nb, n = out.beta.shape[1:]
    write_table(d / f"chain{i}_beta.txt", out.beta.reshape(out.n_keep, nb * n),
                f"kept beta draws, row-major n_beta={nb} x N={n}")
    write_table(d / f"chain{i}_zeta.txt", out.zeta, "final log-scale proposal variances")


def load_chain(d: Path, i: int, nb: int, n: int) -> ChainOutput:
    tr = read_table(d / f"chain{i}_trace.txt")
    if tr.shape[1] != 6:
        tr = tr.reshape(0, 6)
    beta = read_table(d / f"chain{i}_beta.txt").reshape(-1, nb, n)
    zeta = read_table(d / f"chain{i}_zeta.txt")
    return ChainOutput(beta, tr[:, 0].astype(int), tr[:, 1].astype(int), tr[:, 2], tr[:, 3],
                       tr[:, 4].astype(int), tr[:, 5], {}, zeta)


def combine_chains(outs: list) -> ChainOutput:
    cat = lambda name: np.concatenate([getattr(o, name) for o in outs])  # noqa: E731
    return ChainOutput(cat("beta"), cat("m"), cat("q"), cat("theta1"), cat("sigma2"),
                       cat("k_nn"), cat("log_posterior"), {}, outs[0].zeta)


def diagnostics_report(label: str, outs: list) -> str:
    lines = [f"model {label}", f"chains {len(outs)}"]
    for i, o in enumerate(outs):
        lines.append(f"[chain {i}]")
        lines.append(f"kept_draws {o.n_keep}")
        acc = o.acceptance
        if acc:
            lines.append(f"acceptance_beta_mean {np.mean(acc['beta']):.4f}")
            lines.append(f"acceptance_beta_min {np.min(acc['beta']):.4f}")
            lines.append(f"acceptance_theta1 {acc['theta1']:.4f}")
            lines.append(f"acceptance_sigma2 {acc['sigma2']:.4f}")
        for name, v in (("m", o.m), ("q", o.q), ("theta1", o.theta1), ("sigma2_eta", o.sigma2)):
            if o.n_keep:
                q = np.percentile(v, [2.5, 50, 97.5])
                lines.append(f"{name} mean {np.mean(v):.6g} q025 {q[0]:.6g} "
                             f"median {q[1]:.6g} q975 {q[2]:.6g}")
            else:
                lines.append(f"{name} no draws")
        if o.n_keep and (o.k_nn >= 0).any():
            ks, cnt = np.unique(o.k_nn, return_counts=True)
            lines.append("k_nn " + " ".join(f"{k}:{c}" for k, c in zip(ks, cnt)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifest


def write_manifest(cfg: RunConfig, command: str, files: list, extra: dict | None = None) -> Path:
    out = cfg.output_dir
    entries = {}
    for f in sorted(set(Path(p) for p in files)):
        try:
            rel = str(f.relative_to(out))
        except ValueError:
            rel = str(f)
        entries[rel] = sha256_file(f)
    manifest = {
        "command": command,
        "label": cfg.label,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": cfg.run.seed,
        "chains": cfg.run.chains,
        "inputs": {"counts": sha256_file(cfg.counts), "forcing": sha256_file(cfg.forcing)},
        "files": entries,
    }
    if extra:
        manifest.update(extra)
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _files_under(d: Path) -> list:
    return sorted(p for p in Path(d).rglob("*") if p.is_file())


# ---------------------------------------------------------------------------
# commands


def cmd_cache(cfg: RunConfig, rebuild: bool = False) -> Path:
    prep = prepare(cfg)
    coeffs, _ = reduce_forcing(cfg, prep, cfg.output_dir)
    _, path = load_or_build_cache(cfg, prep, coeffs, rebuild)
    files = _files_under(cfg.output_dir / "coeffs") + [path]
    write_manifest(cfg, "cache", files)
    return path


def cmd_fit(cfg: RunConfig, rebuild: bool = False) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    prep = prepare(cfg)
    y_train = prep.counts.counts[:, prep.train].astype(float)
    with stage("nmf"):
        n = cfg.nmf
        fac = fit_offset_nmf(y_train, cfg.n_beta, nnsvd_init(y_train, cfg.n_beta), n.max_iter,
                             n.tol, n.offset, n.ridge, n.inner)
        fac.save(out / "nmf")
        write_table(out / "train_index.txt", prep.train[None, :], "training response indices",
                    fmt="%d")
        write_table(out / "targets.txt", prep.targets[None, :], "forecast response indices",
                    fmt="%d")
    coeffs, failed = reduce_forcing(cfg, prep, out)
    cache, cache_path = load_or_build_cache(cfg, prep, coeffs, rebuild)
    with stage("sampler"):
        model = AnalogModel.build(y_train, fac, cache, prep.train, cfg.hyper)
        outs = run_chains(model, fac.b, cfg.sampler, cfg.run.seed, cfg.run.chains)
        chain_dir = out / "chains"
        for i, o in enumerate(outs):
            save_chain(o, chain_dir, i)
        report = diagnostics_report(cfg.label, outs)
        if failed:
            report += "".join(f"le_failed k_nn={k}: {msg}\n" for k, msg in failed.items())
        (out / "diagnostics.txt").write_text(report)
    if cfg.plots:
        with stage("plots"):
            from .plotting import plot_nmf_loss, plot_posteriors, plot_traces

            fig_dir = out / "figures"
            plot_traces(combine_chains(outs), fig_dir / "traces.png", cfg.label)
            plot_posteriors(combine_chains(outs), fig_dir / "posterior_mq.png", cfg.label)
            plot_nmf_loss(fac, fig_dir / "nmf_loss.png")
    files = (
        _files_under(out / "nmf") + _files_under(out / "coeffs") + _files_under(out / "chains")
        + [out / "config.yaml", out / "diagnostics.txt", out / "train_index.txt",
           out / "targets.txt", cache_path]
        + (_files_under(out / "figures") if cfg.plots else [])
    )
    return write_manifest(cfg, "fit", files)


def _load_fit(cfg: RunConfig):
    out = cfg.output_dir
    needed = [out / "nmf" / "psi.txt", out / "chains" / "chain0_trace.txt", out / "targets.txt"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError(f"fit artifacts missing (run `fit` first): {missing}")
    fac = Factorization.load(out / "nmf")
    train = read_table(out / "train_index.txt").astype(int).ravel()
    targets = read_table(out / "targets.txt").astype(int).ravel()
    for i in range(cfg.run.chains):
        if not (out / "chains" / f"chain{i}_trace.txt").exists():
            raise FileNotFoundError(
                f"chain {i} missing; fit was run with fewer than {cfg.run.chains} chains"
            )
    outs = [load_chain(out / "chains", i, fac.rank, train.size) for i in range(cfg.run.chains)]
    return fac, train, targets, combine_chains(outs)


def _write_grids(d: Path, grids: Grids, locations, prefix: str, label: str) -> list:
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("mean", "lower", "upper"):
        p = d / f"{prefix}{name}.txt"
        write_table(p, getattr(grids, name)[:, None], f"{label} {name}; rows follow sites.coords")
        paths.append(p)
    coords = d / "sites.coords"
    write_locations(coords, locations)
    return paths + [coords]


def _year_tag(counts: CountField, t: int) -> str:
    return str(counts.stamp(t).astype("datetime64[Y]"))


def cmd_forecast(cfg: RunConfig) -> Path:
    with stage("forecast"):
        fac, train, targets, chain = _load_fit(cfg)
        prep = prepare(cfg)
        cache_path = cfg.cache_dir / f"distances_{cfg.method}_{cache_key(cfg, prep)}.npz"
        if not cache_path.exists():
            raise FileNotFoundError(f"distance cache missing: {cache_path}")
        cache = DistanceCache.load(cache_path)
        y_train = prep.counts.counts[:, train].astype(float)
        model = AnalogModel.build(y_train, fac, cache, train, cfg.hyper)
        files = []
        seed = cfg.run.forecast_seed if cfg.run.forecast_seed is not None else cfg.run.seed
        results = {}
        for t in targets:
            res = forecast(chain, model, int(t), (int(seed), FORECAST_STREAM, int(t)),
                           noise=cfg.run.forecast_noise)
            results[int(t)] = res
            d = cfg.output_dir / "forecast" / _year_tag(prep.counts, int(t))
            files += _write_grids(d, Grids(res.mean, res.lower, res.upper),
                                  prep.counts.locations, "", cfg.label)
            p = d / "draws.txt"
            write_table(p, res.draws, "posterior predictive draws; one row per kept draw",
                        fmt="%d")
            files.append(p)
            p = d / "weights.txt"
            write_table(p, np.vstack([train, res.mean_weights]),
                        "row 1: training response index, row 2: posterior mean weight")
            files.append(p)
            p = d / "beta.txt"
            write_table(p, res.beta, "forecast coefficient draws")
            files.append(p)
            # the other composition mode, reported for comparison only
            alt = forecast(chain, model, int(t), (int(seed), FORECAST_STREAM, int(t)),
                           noise=not cfg.run.forecast_noise)
            point, noisy = (alt, res) if cfg.run.forecast_noise else (res, alt)
            p = d / "composition_modes.txt"
            p.write_text(
                f"primary {'noise' if cfg.run.forecast_noise else 'point'}\n"
                f"point_mean_total {point.mean.sum():.6f}\n"
                f"noise_mean_total {noisy.mean.sum():.6f}\n"
                f"max_site_abs_diff {np.abs(point.mean - noisy.mean).max():.6f}\n"
                f"point_mean_band_width {(point.upper - point.lower).mean():.6f}\n"
                f"noise_mean_band_width {(noisy.upper - noisy.lower).mean():.6f}\n"
            )
            files.append(p)
    if cfg.plots:
        with stage("plots"):
            from .plotting import plot_forecast

            for t, res in results.items():
                if t < prep.counts.T:
                    tag = _year_tag(prep.counts, t)
                    p = cfg.output_dir / "figures" / f"forecast_{tag}.png"
                    plot_forecast(res, prep.counts.counts[:, t], p, f"{cfg.label} {tag}")
                    files.append(p)
    return write_manifest(cfg, "forecast", files)


def cmd_baseline(cfg: RunConfig) -> Path:
    with stage("baseline"):
        prep = prepare(cfg)
        files = []
        for t in prep.targets:
            past = prep.train[prep.train < t]
            if past.size == 0:
                past = prep.train
            y = prep.counts.counts[:, past]
            d = cfg.output_dir / "baseline" / _year_tag(prep.counts, int(t))
            files += _write_grids(d, climatology(y), prep.counts.locations, "climatology_",
                                  "climatology")
            files += _write_grids(d, persistence(y), prep.counts.locations, "persistence_",
                                  "persistence")
    return write_manifest(cfg, "baseline", files)


def cmd_evaluate(cfg: RunConfig) -> Path:
    with stage("evaluate"):
        prep = prepare(cfg)
        rows = []
        for t in prep.targets:
            if t >= prep.counts.T:
                continue
            tag = _year_tag(prep.counts, int(t))
            obs = prep.counts.counts[:, t]
            sources = {
                cfg.label: cfg.output_dir / "forecast" / tag / "mean.txt",
                "climatology": cfg.output_dir / "baseline" / tag / "climatology_mean.txt",
                "persistence": cfg.output_dir / "baseline" / tag / "persistence_mean.txt",
            }
            for name, path in sources.items():
                if not path.exists():
                    raise FileNotFoundError(f"missing {name} grid {path}")
                s = evaluate(read_table(path).ravel(), obs)
                corr = "undefined" if not s.corr_defined else f"{s.corr:.6f}"
                rows.append(f"{tag} {name} {s.mspe:.6f} {corr}")
        if not rows:
            raise ValueError("no held-out years with observed counts to evaluate")
        path = cfg.output_dir / "evaluation.txt"
        path.write_text("# year model mspe corr\n" + "\n".join(rows) + "\n")
    return write_manifest(cfg, "evaluate", [path])


def cmd_simulate(spec, out_dir, n_iter: int = 2000, burn_in: int = 500) -> Path:
    """Write a synthetic dataset plus a ready-to-run config."""
    from .fields import write_count_field, write_forcing_field
    from .synthetic import generate_synthetic

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with stage("simulate"):
        cf, ff, truth = generate_synthetic(spec)
        write_count_field(cf, out / "counts.txt")
        write_forcing_field(ff, out / "forcing.txt")
        np.savez(out / "truth.npz", psi=truth.psi, g=truth.g, intensity=truth.intensity,
                 patterns=truth.patterns, latent=truth.latent,
                 regime=np.array([]) if truth.regime is None else truth.regime,
                 next_counts=truth.next_counts)
        last_year = int(str(cf.times[-1].astype("datetime64[Y]")))
        planted = spec.system == "planted-analog-cycle"
        q_min, q_max = (max(1, spec.planted_lag - 3), spec.planted_lag + 3) if planted else (1, 12)
        cfg = {
            "counts": "counts.txt",
            "forcing": "forcing.txt",
            "output_dir": "run",
            "method": "eof",
            "n_beta": spec.n_latent,
            "n_alpha": spec.n_pattern if planted else 5,
            "holdout": [last_year],
            "plots": True,
            "alignment": {"tau": spec.tau, "anchor_offset": 0},
            "hyper": {"q_min": q_min, "q_max": q_max, "m_min": 1,
                      "m_max": min(15, spec.T - 2)},
            "sampler": {"n_iter": n_iter, "burn_in": burn_in, "seed": spec.seed},
        }
        import yaml

        with open(out / "config.yaml", "w") as fh:
            yaml.safe_dump(cfg, fh, sort_keys=True)
        with open(out / "synthetic.yaml", "w") as fh:
            yaml.safe_dump({k: getattr(spec, k) for k in spec.__dataclass_fields__}, fh,
                           sort_keys=True)
    return out / "config.yaml"


def with_overrides(cfg: RunConfig, seed=None, method=None, holdout=None, chains=None) -> RunConfig:
    if seed is not None:
        cfg.run = replace(cfg.run, seed=int(seed))
    if method is not None:
        cfg.method = method.lower()
    if holdout is not None:
        cfg.holdout = tuple(int(y) for y in holdout)
    if chains is not None:
        if chains < 1:
            raise ValueError("chains must be >= 1")
        cfg.run = replace(cfg.run, chains=int(chains))
    return cfg
