"""Record golden outputs of a seeded small model.

Run once after a verified implementation; the tests compare against the
stored file so refactors cannot silently change numerics.

    python tests/golden/make_golden.py
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from conftest import random_history, small_model  # noqa: E402
from granular_ddp import learned, state_space  # noqa: E402


def cases():
    model = small_model(n_nodes=4, history=2, seed=7)
    rng = np.random.default_rng(2024)
    hist, box, acc = random_history(rng, 4, 2)
    X = state_space.join_state(hist, box)
    u = 0.013
    return model, hist, box, acc, X, u


def compute():
    model, hist, box, acc, X, u = cases()
    return {
        "accel": learned.predict_accel(model, hist, box, acc).tolist(),
        "step": learned.predict_step(model, hist, box, acc).tolist(),
        "dynamics_F": state_space.dynamics_F(X, u, model).tolist(),
    }


if __name__ == "__main__":
    path = os.path.join(os.path.dirname(__file__), "graph_net.json")
    with open(path, "w") as fh:
        json.dump(compute(), fh, indent=1)
    print("wrote", path)
