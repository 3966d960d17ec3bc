"""Train a toy Hyperloop, quantize it to INT4 and look inside with the logit lens.

Takes under a minute on one core. Run: python3 demos/train_quantize_inspect.py
"""

from hyperloop import analyze, quant
from hyperloop.config import ModelConfig, RunConfig, TrainConfig
from hyperloop.data import load_corpus
from hyperloop.train import TrainState, evaluate_ppl, make_stream, train_loop


def main():
    run = RunConfig(
        ModelConfig(model_dim=64, head_count=4, arch_kind="hyperloop", streams=4),
        TrainConfig(batch_size=8, seq_len=64, total_steps=150, warmup_steps=15),
    )
    data = make_stream(run, load_corpus(n_bytes=300_000))
    state = TrainState.fresh(run)
    logs = train_loop(state, data)
    print(f"loss {logs[0]['loss']:.3f} -> {logs[-1]['loss']:.3f} over {len(logs)} steps")

    calib = [data.batch(s, 8)[0] for s in range(8)]
    acc = quant.collect_hessians(state.model, calib)
    print(f"middle.0 attention Hessian saw {acc.count['middle.0.attn.wq']} inputs, begin.0 saw {acc.count['begin.0.attn.wq']}")
    fp = evaluate_ppl(state.model, data, max_windows=128)["ppl"]
    for method in ("rtn", "gptq"):
        res = quant.quantize_model(state.model, acc, group_size=32, method=method)
        ppl = evaluate_ppl(res.model, data, max_windows=128)["ppl"]
        print(f"{method:4s} INT4: calibration loss {sum(res.loss.values()):.3f}, PPL {ppl:.3f} (full precision {fp:.3f})")

    batches = list(data.heldout_batches(16, 64))
    lens = analyze.logit_lens(state.model, batches)
    for d, (ce, boundary) in enumerate(zip(lens.ce, lens.loop_boundary)):
        print(f"layer {d:2d} lens CE {ce:6.3f}{'  <- end of loop' if boundary else ''}")
    sim = analyze.cosine_map(state.model, batches)
    print(f"mean cosine similarity of a middle layer across loops: {sim.cross_loop:.3f}")


if __name__ == "__main__":
    main()
