"""Regenerate the committed golden files under tests/data.

Run only after a deliberate, reviewed change to the numerics:

    python tests/regen_goldens.py tail gradients loss csv
"""

import sys
from pathlib import Path

import torch

from gifdlab.core import Checkpoint, save_checkpoint

DATA = Path(__file__).parent / "data"


def tail():
    from gifdlab.models import make_generator

    gen = make_generator(11, latent_dim=16, num_classes=10, out_channels=3, img_size=32, base=8)
    gen.eval()
    h = torch.randn((2,) + gen.feature_shape(2), generator=torch.Generator().manual_seed(11))
    with torch.no_grad():
        out = gen.tail(h, 2, torch.tensor([3, 7]))
    save_checkpoint(Checkpoint({"features": h, "output": out}), DATA / "golden_generator_tail.glns")


def gradients():
    from conftest import golden_gradient_setup

    model, batch = golden_gradient_setup()
    from gifdlab.flsim import client_local_gradients
    from gifdlab.core import gradients_to_checkpoint

    save_checkpoint(gradients_to_checkpoint(client_local_gradients(model, batch)), DATA / "golden_gradients.glns")


def loss():
    from conftest import golden_loss_value

    (DATA / "golden_loss.txt").write_text(f"{golden_loss_value():.9e}\n")


def csv():
    from conftest import golden_report_csv

    (DATA / "golden_report.csv").write_text(golden_report_csv())


if __name__ == "__main__":
    sys.path.insert(0, str(Path(__file__).parent))
    for name in sys.argv[1:]:
        globals()[name]()
        print("wrote", name)
