import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"


def golden_gradient_setup():
    from gifdlab.core import ImageBatch
    from gifdlab.data import make_dataset
    from gifdlab.models import make_classifier

    model = make_classifier("convnet4", 10, (3, 32, 32), seed=21, width=4)
    model.eval()
    d = make_dataset(10, 21)
    return model, ImageBatch(d.images[:2].clone(), d.labels[:2].clone())


def golden_loss_value():
    from gifdlab.gradmatch import MatchObjective, attack_loss
    from gifdlab.flsim import client_local_gradients

    model, batch = golden_gradient_setup()
    observed = client_local_gradients(model, batch)
    dummy = torch.rand(batch.pixels.shape, generator=torch.Generator().manual_seed(21))
    return attack_loss(dummy, batch.labels, model, observed, MatchObjective()).item()


def golden_report_csv():
    """Fixed-seed capture + attack run; the CSV excludes wall time so it is byte-stable."""
    from gifdlab.attacks import AttackConfig, run_attack
    from gifdlab.bench import evaluate, result_row, rows_to_csv
    from gifdlab.core import load_checkpoint
    from gifdlab.data import make_dataset
    from gifdlab.flsim import capture_round
    from gifdlab.models import checkpoint_from_model, generator_from_checkpoint, make_classifier

    gen = generator_from_checkpoint(load_checkpoint(DATA / "generator.glns"))
    ck = checkpoint_from_model(make_classifier("convnet4", 10, (3, 32, 32), seed=5, width=8), {"round": "0"})
    victim = make_dataset(50, 77)
    rows = []
    for i in range(2):
        rec = capture_round(ck, victim, 1, None, seed=i)
        for method in ("pixel", "latent", "gifd"):
            cfg = AttackConfig(method=method, K=3, radii=[20, 40, 80], iters=30, trials=2, seed=100 + i)
            rep = run_attack(rec, cfg, gen=gen)
            rows.append(result_row(method, i, rep, evaluate(rep.final_images.pixels, rec.victim_batch.pixels)))
    return rows_to_csv(rows, include_time=False)


@pytest.fixture(scope="session")
def generator():
    from gifdlab.core import load_checkpoint
    from gifdlab.models import generator_from_checkpoint

    return generator_from_checkpoint(load_checkpoint(DATA / "generator.glns"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
