import pytest

from freshscan.cli import main as cli_main
from freshscan.synth import SyntheticWorldConfig, generate_synthetic_archive

from helpers import run_memory_pipeline


@pytest.fixture(scope="session")
def arc7():
    """Default synthetic world, seed 7 (5x5 cells of 520 px, 3 visits)."""
    return generate_synthetic_archive(SyntheticWorldConfig(rng_seed=7))


@pytest.fixture(scope="session")
def pipe7():
    """Full in-memory pipeline run on the default seed-7 world."""
    return run_memory_pipeline(SyntheticWorldConfig(rng_seed=7))


@pytest.fixture(scope="session")
def tiny_cfg():
    return SyntheticWorldConfig(rng_seed=11, cells_x=3, cells_y=3, cell_px=440,
                                visits=3, impact_rate=4e-8)


@pytest.fixture(scope="session")
def tiny_world_dir(tiny_cfg, tmp_path_factory):
    from freshscan.synth import write_synthetic_archive

    out = tmp_path_factory.mktemp("tiny_world")
    write_synthetic_archive(tiny_cfg, out)
    return out


@pytest.fixture(scope="session")
def chain_dir(tiny_world_dir, tmp_path_factory):
    """Artifacts of a CLI run over the tiny world: model, grids, candidates,
    selections, bias reports."""
    run = tmp_path_factory.mktemp("chain")
    steps = [
        ["train", "--archive", str(tiny_world_dir / "archive"),
         "--truth", str(tiny_world_dir / "truth.jsonl"),
         "--out", str(run / "model.json"), "--seed", "11", "--window-size", "120"],
        ["calibrate", "--model", str(run / "model.json"),
         "--holdout", str(run / "holdout_scores.csv")],
        ["scan", "--archive", str(tiny_world_dir / "archive"),
         "--model", str(run / "model.json"), "--out", str(run / "grids"),
         "--window-size", "120", "--stride", "40", "--parallelism", "2"],
        ["build", "--scan-dir", str(run / "grids"),
         "--out", str(run / "candidates.jsonl"),
         "--ti-primary", str(tiny_world_dir / "ti_map.pgm")],
        ["select", "--candidates", str(run / "candidates.jsonl"), "--mode", "top-k",
         "--k", "5", "--out", str(run / "sel_top_k.json")],
        ["select", "--candidates", str(run / "candidates.jsonl"), "--mode", "stratified",
         "--per-bin", "2", "--out", str(run / "sel_stratified.json")],
        ["report", "--candidates", str(run / "candidates.jsonl"),
         "--selection", str(run / "sel_top_k.json"),
         "--selection", str(run / "sel_stratified.json"),
         "--ti-primary", str(tiny_world_dir / "ti_map.pgm"),
         "--out", str(run / "reports")],
    ]
    for step in steps:
        assert cli_main(step) == 0, f"CLI step failed: {step[0]}"
    return run
