import numpy as np
import pytest

from bisim_mpc.models import ModelConfig, ModelSet

FD_H = 1e-5


def small_models(seed: int = 0, state_dim: int = 3, action_dim: int = 1,
                 latent_dim: int = 4, hidden_dim: int = 8) -> ModelSet:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(state_dim=state_dim, action_dim=action_dim,
                      latent_dim=latent_dim, hidden_dim=hidden_dim)
    return ModelSet(cfg, rng)


def fd_grad_check(loss_fn, store, analytic: dict, rng: np.random.Generator,
                  n_coords: int = 40, rel_tol: float = 1e-4,
                  names=None) -> float:
    """Central finite differences (h = 1e-5) on a random coordinate subset.

    ``loss_fn`` recomputes the scalar loss from current parameter values;
    ``analytic`` maps parameter name to its gradient array. Returns the
    worst relative error seen.
    """
    names = list(analytic) if names is None else list(names)
    sizes = np.array([store.params[n].data.size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right")) - 1
        name = names[which]
        i = int(flat - offsets[which])
        p = store.params[name].data
        orig = p.flat[i]
        p.flat[i] = orig + FD_H
        up = loss_fn()
        p.flat[i] = orig - FD_H
        down = loss_fn()
        p.flat[i] = orig
        fd = (up - down) / (2 * FD_H)
        a = analytic[name].flat[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        worst = max(worst, rel)
        assert rel <= rel_tol, f"{name}[{i}]: analytic {a} vs fd {fd}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
