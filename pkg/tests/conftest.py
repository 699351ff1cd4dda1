import numpy as np
import pytest

from uniseg import clipdriver as cd
from uniseg.backbone import BackboneConfig
from uniseg.model import init_model
from uniseg.phantom import toy_taxonomy


def finite_difference(loss_fn, param: np.ndarray, idx, h_scale: float = 1e-6) -> float:
    """Central finite difference of a scalar loss wrt one parameter entry."""
    orig = param[idx]
    h = h_scale * max(1.0, abs(orig))
    param[idx] = orig + h
    lp = loss_fn()
    param[idx] = orig - h
    lm = loss_fn()
    param[idx] = orig
    return (lp - lm) / (2.0 * h)


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)


def check_grads_fd(loss_fn, params: dict, grads: dict, rng, probes: int = 10,
                   tol: float = 1e-4) -> None:
    """Probe random entries of every gradient against central differences."""
    for name in sorted(grads):
        p = params[name]
        for _ in range(probes):
            idx = tuple(rng.integers(s) for s in p.shape)
            fd = finite_difference(loss_fn, p, idx)
            ag = float(grads[name][idx])
            # absolute fallback guards the exactly-zero-gradient entries
            assert rel_error(ag, fd) < tol or abs(ag - fd) < 1e-10, \
                f"{name}{idx}: analytic {ag:.8e} vs fd {fd:.8e}"


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(channels=(3, 4), decoder_channels=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    tax = toy_taxonomy(2, (1,))  # classes 1,2 organs; 3 = tumor inside 1
    return init_model(tax, cd.one_hot_store(tax), tiny_cfg, seed=11)
