import json

import numpy as np
import pytest
import yaml

from hbaforecast.cli import main
from hbaforecast.fields import CountField, ForcingField, Location, write_count_field, write_forcing_field
from hbaforecast.pipeline import read_table


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", str(d), "--seed", "3", "--n-y", "8", "--years", "16",
                 "--n-iter", "200", "--burn-in", "50"]) == 0
    return d


def run_all(cfg, *extra):
    for cmd in ("fit", "forecast", "baseline", "evaluate"):
        assert main([cmd, str(cfg), *extra]) == 0, cmd


def test_full_pipeline_writes_outputs_and_manifests(dataset):
    cfg = dataset / "config.yaml"
    run_all(cfg)
    out = dataset / "run"
    for cmd in ("fit", "forecast", "baseline", "evaluate"):
        m = json.loads((out / f"manifest_{cmd}.json").read_text())
        assert m["label"] == "HBA1" and m["seed"] == 3 and len(m["config_digest"]) == 64
        for rel, digest in m["files"].items():
            assert (out / rel).exists(), rel
    year = yaml.safe_load(cfg.read_text())["holdout"][0]
    fc = out / "forecast" / str(year)
    mean, lo, hi = (read_table(fc / f"{n}.txt").ravel() for n in ("mean", "lower", "upper"))
    assert np.all(lo <= mean) and np.all(mean <= hi)
    assert read_table(fc / "draws.txt").shape == (150, 8)  # kept iterations x sites
    assert (fc / "sites.coords").read_text().count("\n") == 8
    for name in ("traces", "posterior_mq", "nmf_loss", f"forecast_{year}"):
        assert (out / "figures" / f"{name}.png").stat().st_size > 0
    rows = (out / "evaluation.txt").read_text().splitlines()[1:]
    assert [r.split()[1] for r in rows] == ["HBA1", "climatology", "persistence"]


def test_rerun_reproduces_manifests_bit_for_bit(dataset, tmp_path):
    cfg = yaml.safe_load((dataset / "config.yaml").read_text())
    cfg.update(counts=str(dataset / "counts.txt"), forcing=str(dataset / "forcing.txt"),
               output_dir=str(tmp_path / "out"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    run_all(path)
    first = {p.name: p.read_bytes() for p in (tmp_path / "out").glob("manifest_*.json")}
    import shutil

    shutil.rmtree(tmp_path / "out")
    run_all(path)
    second = {p.name: p.read_bytes() for p in (tmp_path / "out").glob("manifest_*.json")}
    assert first == second and len(first) == 4


def test_le_method_is_labelled_and_chains_run(dataset, tmp_path):
    cfg = yaml.safe_load((dataset / "config.yaml").read_text())
    cfg.update(counts=str(dataset / "counts.txt"), forcing=str(dataset / "forcing.txt"),
               output_dir=str(tmp_path / "le"), plots=False)
    cfg["sampler"].update(n_iter=60, burn_in=20)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["fit", str(path), "--method", "le", "--chains", "2"]) == 0
    assert main(["forecast", str(path), "--method", "le", "--chains", "2"]) == 0
    m = json.loads((tmp_path / "le" / "manifest_forecast.json").read_text())
    assert m["label"] == "HBA2" and m["chains"] == 2
    diag = (tmp_path / "le" / "diagnostics.txt").read_text()
    assert "model HBA2" in diag and "[chain 1]" in diag and "k_nn" in diag
    year = cfg["holdout"][0]
    assert read_table(tmp_path / "le" / "forecast" / str(year) / "draws.txt").shape[0] == 80


def test_cache_command_and_rebuild(dataset, tmp_path):
    cfg = yaml.safe_load((dataset / "config.yaml").read_text())
    cfg.update(counts=str(dataset / "counts.txt"), forcing=str(dataset / "forcing.txt"),
               output_dir=str(tmp_path / "c"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["cache", str(path)]) == 0
    cached = list((tmp_path / "c" / "cache").glob("distances_eof_*.npz"))
    assert len(cached) == 1
    stamp = cached[0].stat().st_mtime_ns
    assert main(["cache", str(path)]) == 0
    assert cached[0].stat().st_mtime_ns == stamp  # reused
    assert main(["cache", str(path), "--rebuild"]) == 0
    assert cached[0].stat().st_mtime_ns != stamp


def test_errors_are_stage_tagged(dataset, tmp_path, capsys):
    cfg = yaml.safe_load((dataset / "config.yaml").read_text())
    cfg.update(counts=str(dataset / "counts.txt"), forcing=str(dataset / "forcing.txt"),
               output_dir=str(tmp_path / "none"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["forecast", str(path)]) == 1
    assert "stage 'forecast'" in capsys.readouterr().err
    assert main(["fit", str(path), "--holdout", "1800"]) == 1
    assert "stage 'align'" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("counts: a\n")
    assert main(["fit", str(tmp_path / "bad.yaml")]) == 1
    assert "stage 'config'" in capsys.readouterr().err
    cfg["counts"] = str(tmp_path / "missing.txt")
    path.write_text(yaml.safe_dump(cfg))
    assert main(["fit", str(path)]) == 1
    assert "stage 'load'" in capsys.readouterr().err


def test_constant_counts_give_constant_forecast(tmp_path):
    rng = np.random.default_rng(0)
    n_y, T = 6, 14
    locs = tuple(Location(f"s{i}", float(i), 0.0) for i in range(n_y))
    times = np.array([np.datetime64(f"{2000 + t}-05", "M") for t in range(T)])
    write_count_field(CountField(np.full((n_y, T), 5), locs, times), tmp_path / "counts.txt")
    ftimes = np.datetime64("1998-06", "M") + np.arange(12 * T + 12).astype("timedelta64[M]")
    flocs = tuple(Location(f"x{i}", float(i), 1.0) for i in range(4))
    write_forcing_field(ForcingField(rng.normal(size=(4, ftimes.size)), flocs, ftimes),
                        tmp_path / "forcing.txt")
    cfg = {"counts": "counts.txt", "forcing": "forcing.txt", "output_dir": "run",
           "n_beta": 1, "n_alpha": 3, "holdout": [2013], "plots": False,
           "hyper": {"q_min": 1, "q_max": 3, "m_max": 5},
           "sampler": {"n_iter": 400, "burn_in": 100, "seed": 1}}
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    run_all(tmp_path / "cfg.yaml")
    mean = read_table(tmp_path / "run" / "forecast" / "2013" / "mean.txt").ravel()
    se = np.sqrt(5.0 / 300)
    assert np.all(np.abs(mean - 5.0) < 5 * se + 0.25)
    base = read_table(tmp_path / "run" / "baseline" / "2013" / "climatology_mean.txt").ravel()
    assert np.all(base == 5.0)
