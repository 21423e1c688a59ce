import numpy as np
import pytest
import torch

from diveseg.config import RunConfig, format_value, from_mapping
from diveseg.model import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """Small enough that a forward/backward pass takes milliseconds."""
    values = dict(
        num_layers=4,
        embed_dim=16,
        num_heads=2,
        patch_size=8,
        image_size=32,
        style_dim=16,
        prompt_channels=8,
        num_queries=6,
        num_classes=3,
        decoder_rounds=2,
        encoder_width=4,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_run_config(output_dir, **overrides) -> RunConfig:
    """Tiny model on a handful of 32x32 synthetic images; ``overrides`` use flat keys."""
    values = {f"model.{k}": format_value(v) for k, v in vars(tiny_model_config()).items()}
    values.update({
        "data.train_count": "6",
        "data.eval_count": "4",
        "optim.iterations": "4",
        "optim.milestones": "",
        "optim.batch_size": "2",
        "optim.warmup_fraction": "0",
        "output_dir": str(output_dir),
        "log_every": "1",
    })
    values.update({k: format_value(v) for k, v in overrides.items()})
    return from_mapping(values)


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> None:
    """Overwrite every parameter with seeded noise (zero-init branches included)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def finite_difference_check(loss_fn, params, eps: float = 1e-4, tol: float = 1e-3, floor: float = 1e-6):
    """Compare autograd against central differences for every entry of every parameter.

    Run in float64; eps=1e-4 keeps both truncation and round-off error
    well under the tolerance. Returns the worst relative error seen.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = p.grad.detach().clone().view(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, rel)
    assert worst <= tol, f"worst relative gradient error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- acceptance summary: one PASS/FAIL line per criterion-marked test

_criteria: dict[tuple, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _criteria.setdefault(tuple(marker.args), ["PASS", 0.0, ""])
    entry[1] += report.duration
    if report.failed:
        entry[0] = "FAIL"
        crash = getattr(report.longrepr, "reprcrash", None)
        if crash is not None and not entry[2]:
            entry[2] = crash.message.splitlines()[0][:160]
    elif report.skipped and entry[0] != "FAIL":
        entry[0] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (status, seconds, why) in sorted(_criteria.items()):
        line = f"{status} criterion {number}: {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f" -- {why}" if why else ""))
