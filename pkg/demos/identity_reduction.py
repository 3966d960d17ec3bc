"""Hyperloop with fixed identity connections is exactly its looped twin.

Run: python3 demos/identity_reduction.py
"""

import numpy as np

from hyperloop import model as mdl
from hyperloop.config import ModelConfig


def main():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 257, size=24)
    for n in (1, 2, 4):
        cfg = ModelConfig(model_dim=32, head_count=4, arch_kind="hyperloop", streams=n)
        hyper = mdl.build(cfg)
        looped = mdl.build(mdl.twin_config(cfg, "looped"))
        looped.load_state_dict({k: v for k, v in hyper.state_dict().items() if k in looped.named_parameters()})
        diff = np.abs(hyper(x, identity_hc=True).data - looped(x).data).max()
        learned = np.abs(hyper(x).data - looped(x).data).max()
        print(f"n={n}: identity mode max |diff| = {diff:.2e}; learned connections at init differ by {learned:.2e}")


if __name__ == "__main__":
    main()
