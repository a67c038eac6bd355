"""
Long-running reproduction of the imbalance phenomenon on synthetic data.
Skipped unless DGM_RUN_SLOW=1; a full pass takes several minutes on a laptop CPU.
"""

import os

import pytest

from services.synthetic_data import SynthConfig, generate_splits
from services.training_service import AblationGrid, RunConfig, run_ablation

pytestmark = pytest.mark.skipif(os.getenv("DGM_RUN_SLOW") != "1", reason="set DGM_RUN_SLOW=1 to run")

SEEDS = [0, 1, 2]
WORKERS = min(4, os.cpu_count() or 1)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    generate_splits(SynthConfig(videos=2400, dominance=0.6, audio_dim=32, visual_dim=32, seed=0),
                    (2000, 200, 200), str(path))
    return str(path)


# desk-scale recipe; the library defaults mirror the full-size setup
DESK_RECIPE = dict(hidden_dim=64, epochs=25, batch_size=64, optimizer="adam", learning_rate=1e-3,
                   adam_modulation="update")
ARM_GAMMA = 0.5


def _base(data_dir: str) -> RunConfig:
    return RunConfig(data_dir=data_dir, **DESK_RECIPE)


@pytest.fixture(scope="module")
def arm_table(data_dir, tmp_path_factory):
    grid = AblationGrid(arms=["baseline", "dgm", "dgm+msdu"], modes=["fusion"], gammas=[ARM_GAMMA], seeds=SEEDS,
                        workers=WORKERS)
    table = run_ablation(grid, _base(data_dir), str(tmp_path_factory.mktemp("arms")))
    assert (table["status"] == "ok").all()
    return table


class TestImbalancePhenomenon:
    """Modulation narrows the loss gap and helps the weak modality"""

    def test_loss_gap_shrinks(self, arm_table):
        gaps = arm_table.groupby("arm")["balance_gap"].mean()
        assert gaps["baseline"] >= 2.0 * gaps["dgm"]

    def test_weak_modality_improves_in_order(self, arm_table):
        visual = arm_table.groupby("arm")["segment_v"].mean()
        assert visual["baseline"] < visual["dgm"] < visual["dgm+msdu"]

    def test_every_gamma_at_least_matches_baseline(self, data_dir, tmp_path):
        gammas = [round(0.1 * k, 1) for k in range(1, 10)]
        grid = AblationGrid(arms=["baseline", "dgm"], modes=["fusion"], gammas=gammas, seeds=SEEDS, workers=WORKERS)
        table = run_ablation(grid, _base(data_dir), str(tmp_path))
        baseline = table[table["arm"] == "baseline"]["segment_type_av"].mean()
        per_gamma = table[table["arm"] == "dgm"].groupby("gamma")["segment_type_av"].mean()
        assert len(per_gamma) == 9
        assert (per_gamma >= baseline).all()
