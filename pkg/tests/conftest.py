import numpy as np
import pytest

from peftcl.config import parse_config
from peftcl.vit import ViTConfig, init_vit

TINY_TEXT = """
model.image_height = 8
model.image_width = 8
model.patch_size = 4
model.hidden_dim = 8
model.num_layers = 2
model.num_heads = 2
model.ffn_dim = 16
stream.num_classes = 4
stream.num_tasks = 2
stream.train_per_class = 8
stream.test_per_class = 6
stream.pretext_classes = 4
stream.pretext_train_per_class = 12
pretrain.epochs = 2
sx_train.epochs = 2
sx_train.batch_size = 8
l2p_train.epochs = 1
l2l_train.epochs = 1
finetune_train.epochs = 1
joint_train.epochs = 1
l2x.pool_size = 4
l2x.select_count = 2
peft.prompt_length = 2
"""


@pytest.fixture
def tiny_cfg() -> ViTConfig:
    return ViTConfig(8, 8, 3, 4, 8, 2, 2, 16, 3, halved_attention_scale=False, outer_gelu=False)


@pytest.fixture
def tiny_base(tiny_cfg):
    params = init_vit(tiny_cfg, 0, with_head=False)
    params.freeze()
    return params


@pytest.fixture
def images(tiny_cfg):
    rng = np.random.default_rng(0)
    return rng.normal(size=(5, tiny_cfg.image_height, tiny_cfg.image_width, tiny_cfg.channels))


@pytest.fixture
def experiment():
    return parse_config(text=TINY_TEXT)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
