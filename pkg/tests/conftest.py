import numpy as np
import pytest

from tissuegnn.datagen import GeneratorConfig, generate_dataset
from tissuegnn.model import ModelConfig, init_params
from tissuegnn.training import make_splits, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_GENERATOR = dict(sites=10, depth_steps=6, grid_rows=8, grid_cols=8,
                      volume_dims=(32, 32, 16), boundary_margin=15.0,
                      kernel_sigma=15.0, seed=42)

TINY_MODEL = dict(layers=2, hidden=16, k=4, mode="strict_equivariant",
                  disp_widths=(32, 24, 16), force_feat_width=16,
                  force_reg_widths=(32, 24, 16), dtype="f8")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(GeneratorConfig(**TINY_GENERATOR))["primary"]


@pytest.fixture(scope="session")
def tiny_trained(tiny_dataset):
    """A briefly trained small model: enough structure for service tests."""
    cfg = ModelConfig(**TINY_MODEL)
    params = init_params(cfg, seed=5)
    plan = make_splits(tiny_dataset.samples, seed=2)
    result = train(tiny_dataset.samples, params, cfg, plan, epochs=10,
                   batch_size=16, lr=1e-3, seed=3)
    return result.params, cfg


@pytest.fixture(scope="session")
def service_artifacts(tiny_dataset, tiny_trained, tmp_path_factory):
    """Checkpoint + volume + surface files for CLI/service tests."""
    from tissuegnn.model import save_checkpoint
    from tissuegnn.phantom import write_tvol

    out = tmp_path_factory.mktemp("artifacts")
    params, cfg = tiny_trained
    ckpt = out / "model.ckpt"
    save_checkpoint(params, cfg, ckpt, meta={"fixture": True})
    vol = tiny_dataset.volume()
    tvol = out / "phantom.tvol"
    write_tvol(vol, tvol)
    surface = out / "surface.txt"
    pos = tiny_dataset.samples[0].cloud.positions
    surface.write_text("\n".join(f"{p[0]} {p[1]} {p[2]}" for p in pos))
    return {"checkpoint": ckpt, "volume": tvol, "surface": surface,
            "dataset": tiny_dataset, "model_cfg": cfg}
