import numpy as np
import pytest
import torch


def numeric_grad(fn, param: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to every entry of ``param`` (float64)."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn())
        flat[i] = old - h
        down = float(fn())
        flat[i] = old
        grad.view(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Largest entrywise gap, relative to the larger of the two gradients' peak magnitudes."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def max_grad_error(fn, params, h: float = 1e-5, numeric_fns=None) -> dict:
    """Relative error per named parameter between autograd and central differences.

    ``numeric_fns`` optionally maps a parameter name to a different scalar for its
    finite-difference reference.
    """
    numeric_fns = numeric_fns or {}
    for p in params.values():
        p.grad = None
    fn().backward()
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = numeric_grad(numeric_fns.get(name, fn), p, h)
            out[name] = rel_error(analytic, numeric)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(out, **overrides) -> dict:
    """Smallest useful experiment config: a few hundred synthetic rows, one epoch."""
    cfg = {
        "output_dir": str(out),
        "seeds": [0],
        "data": {"source": "synthetic", "synthetic": {"n_train": 400, "n_valid": 200, "n_test": 200}},
        "models": [{"kind": "disectr", "M": 2, "d": 4, "h": 4, "H": 1, "c": 2}],
        "train": {"max_epochs": 1, "batch_size": 128},
        "protocols": {"iid": True},
        "fractions": [0.2],
    }
    cfg.update(overrides)
    return cfg


def write_yaml(path, cfg: dict):
    import yaml

    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


CRITERIA: dict[int, str] = {}


def record_criterion(k: int, passed: bool, detail: str) -> bool:
    line = f"CRITERION {k}: {'PASS' if passed else 'FAIL'} {detail}"
    CRITERIA[k] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
