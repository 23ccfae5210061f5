import numpy as np
import pytest

from apo.envs import make_two_loop, make_two_state, switch_policy
from apo.mdp import TabularPolicy


@pytest.fixture
def two_state():
    return make_two_state()


@pytest.fixture
def two_loop():
    return make_two_loop()


@pytest.fixture
def uniform_policy():
    return switch_policy(0.5, 0.5)


@pytest.fixture
def swap_policy():
    return switch_policy(1.0, 1.0)


def deterministic_policy(actions, n_actions):
    probs = np.zeros((len(actions), n_actions))
    probs[np.arange(len(actions)), actions] = 1.0
    return TabularPolicy(probs)


def finite_difference_max_rel_err(build_loss, params, h=1e-5):
    """Worst per-tensor relative gap between backward() and central differences.

    ``build_loss`` must rebuild the loss graph from the current tensors of
    ``params`` on every call; the relative error is measured per tensor
    against the larger of the two gradient norms.
    """
    from apo.nn import backward

    root, leaves = build_loss()
    grads = backward(root, leaves)
    worst = 0.0
    for name, tensor in params.tensors.items():
        fd = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = float(build_loss()[0].value)
            tensor[idx] = orig - h
            down = float(build_loss()[0].value)
            tensor[idx] = orig
            fd[idx] = (up - down) / (2.0 * h)
        scale = max(float(np.max(np.abs(grads[name]))), float(np.max(np.abs(fd))), 1e-8)
        worst = max(worst, float(np.max(np.abs(fd - grads[name]))) / scale)
    return worst
