import numpy as np
import pytest

from confrank import trainer as T
from confrank.config import DataConfig, ModelConfig, TrainConfig
from confrank.datagen import generate_world, simulate_days
from confrank.schema import default_schema


def tiny_data_config(**over):
    defaults = dict(n_users=60, n_items=120, k_topics=4, n_days=4,
                    new_items_per_day=5, mean_activity=4.0,
                    task_alpha=(1.6, 1.2, 0.8), task_beta=(2.2, 2.6, 1.8),
                    task_gamma=(-1.5, -2.0, -2.5), seed=7)
    defaults.update(over)
    return DataConfig(**defaults)


def tiny_model_config(**over):
    defaults = dict(shared_widths=(16, 8), head_widths=(8, 1), tower_width=8,
                    tower_blocks=1, embed_dim=4, causal_embed_dim=4, seed=3)
    defaults.update(over)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_world():
    cfg = tiny_data_config()
    return cfg, generate_world(cfg)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    cfg, world = tiny_world
    schema = default_schema(cfg.k_topics, cfg.n_age_buckets, cfg.n_content_types)
    logs = list(simulate_days(world, schema))
    days = [T.day_data_from_log(log, schema.hash) for log in logs]
    return cfg, world, schema, logs, days


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
