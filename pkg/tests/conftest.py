from pathlib import Path

import pytest

from morphldm.phantoms import PhantomSpec, write_dataset
from morphldm.pipelines import OptimConfig, RunConfig, ScheduleConfig, Stage2Config
from morphldm.nets import NetConfig

TINY_SPEC = PhantomSpec(image_size=(32, 32))
TINY_NET = dict(image_size=(32, 32), base_width=8, unet_channels=(16, 32), cross_attention_levels=(1,),
                condition_embed_dim=16, disc_width=8, predictor_channels=(8, 8, 16, 16))


def tiny_config(root: Path, variant: str, data: Path, **overrides) -> RunConfig:
    kw = dict(
        variant=variant,
        dataset=str(data / "train"),
        val_dataset=str(data / "val"),
        output=str(root / variant),
        seed=3,
        heldout_size=16,
        net=NetConfig(**TINY_NET),
        schedule=ScheduleConfig(T=20),
        stage1=OptimConfig(lr=1e-3, steps=6, batch_size=4, warmup=2, log_every=1, checkpoint_every=4),
        stage2=Stage2Config(lr=1e-3, steps=6, batch_size=8, warmup=2, log_every=1, checkpoint_every=4,
                            calibration_size=32),
    )
    kw.update(overrides)
    return RunConfig(**kw)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("data")
    write_dataset(TINY_SPEC, 48, (5, 100), 0.5, root / "train", seed=1)
    write_dataset(TINY_SPEC, 24, (5, 100), 0.5, root / "val", seed=2, age_distribution="uniform")
    return root


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
