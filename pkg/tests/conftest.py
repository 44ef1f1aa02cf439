import numpy as np
import pytest

from niab.episodes import Episode, OracleLabel
from niab.ranker import RankerConfig, init_params
from niab.scenegen import GenConfig, generate_corpus
from niab.simulator import ExpansionTable
from niab.vocab import load_default_vocabs


@pytest.fixture(scope="session")
def vocabs():
    return load_default_vocabs()


@pytest.fixture(scope="session")
def table():
    return ExpansionTable.default()


@pytest.fixture(scope="session")
def small_corpus(vocabs):
    # 60 episodes: enough to cover all scenes and label counts
    return generate_corpus(GenConfig(seed=7, n_episodes=60), vocabs)


@pytest.fixture(scope="session")
def tiny_config():
    return RankerConfig(
        d_model=16, n_layers=1, n_heads=2, mlp_hidden=16,
        max_steps=3, max_candidates=4, input_dim=8,
    )


@pytest.fixture()
def tiny_setup(tiny_config):
    """Frozen tiny model plus a random masked batch."""
    params = init_params(tiny_config, seed=0)
    rng = np.random.default_rng(1)
    B, S, C = 2, 3, 4
    H = rng.normal(size=(B, S, tiny_config.input_dim))
    A = rng.normal(size=(B, C, tiny_config.input_dim))
    step_mask = np.array([[True, True, True], [True, True, False]])
    cand_mask = np.array([[True] * 4, [True, True, True, False]])
    targets = [(1, 2), (0, 1)]
    return params, H, A, step_mask, cand_mask, targets


def make_episode(**kw):
    base = dict(
        episode_id="kitchen-test-0",
        scene="kitchen",
        human_task_seq=["find_tomato", "bring_tomato_to_countertop", "cut_tomato"],
        robot_vocab=["no_op", "bring_knife_to_countertop", "clean_sink"],
        oracle_labels=[OracleLabel(1, "bring_knife_to_countertop")],
    )
    base.update(kw)
    return Episode(**base)
