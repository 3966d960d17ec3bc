"""Parameter budgets at the 1024- and 2048-wide shapes, counted without building tensors.

Run: python3 demos/parameter_budget.py
"""

from hyperloop import model as mdl
from hyperloop.config import ModelConfig


def shape(arch, C):
    edge = 2 if C == 1024 else 3
    if arch == "vanilla":
        return dict(begin_layers=edge, middle_layers=12, loops=1, end_layers=edge)
    return dict(begin_layers=edge, middle_layers=4, loops=3, end_layers=edge)


def main():
    for C in (1024, 2048):
        counts = {}
        for arch in ("vanilla", "looped", "hyperloop"):
            cfg = ModelConfig(vocab_size=32000, model_dim=C, head_count=16, arch_kind=arch,
                              streams=4 if arch == "hyperloop" else 1, **shape(arch, C))
            c = mdl.count_params(cfg)
            counts[arch] = c
            print(f"C={C} {arch:9s} depth {c['unrolled_depth']:2d}  non-embedding {c['non_embedding'] / 1e6:7.1f}M")
        delta = counts["hyperloop"]["total"] - counts["looped"]["total"]
        no_norm = delta - counts["hyperloop"]["hyperconn"] + counts["hyperloop"]["hyperconn_no_norm"]
        print(f"C={C} hyper-connection overhead {delta:,} ({no_norm:,} without the per-loop norm weight)\n")


if __name__ == "__main__":
    main()
