"""Command line: ``hyperloop {train,eval,quantize,analyze,params,sweep}``.

Every verb resolves one effective run config (``--config`` file, then
``--seed``, then ``--set section.key=value`` overrides) and writes it to
``<out>/config.json``. Exit codes: 0 ok, 2 configuration or input error,
3 runtime error; errors are reported on one stderr line.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import analyze, checkpoint, quant
from .config import RunConfig
from .data import load_corpus
from .errors import CheckpointError, ConfigError, HyperloopError, InputError
from .model import count_params, twin_config
from .train import TrainState, evaluate_ppl, make_stream, train_loop

log = logging.getLogger("hyperloop")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_AXES = ("loops", "streams", "hc_placement", "hres_mode")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperloop", description="Looped transformers with hyper-connections, desk scale.")
    p.add_argument("verb", choices=("train", "eval", "quantize", "analyze", "params", "sweep"))
    p.add_argument("--config", help="run config JSON ({'model': {...}, 'train': {...}})")
    p.add_argument("--seed", type=int, help="sets model.seed and train.seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.total_steps=50")
    p.add_argument("--checkpoint", help="input checkpoint for eval/quantize/analyze (default: <out>/checkpoint.hltc)")
    p.add_argument("--bits", type=int, choices=(4, 8), default=4)
    p.add_argument("--group", type=int, default=32, help="quantization group size")
    p.add_argument("--axis", choices=SWEEP_AXES, help="sweep axis")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress per-step progress")
    return p


# -- config resolution -------------------------------------------------------------------------
def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    run = base if base is not None else (RunConfig.load(args.config) if args.config else RunConfig())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        run = run.with_overrides([f"model.seed={args.seed}", f"train.seed={args.seed}"])
    return run.with_overrides(args.set)


def write_config(run: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(run.to_json())


def write_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def corpus_for(run: RunConfig) -> np.ndarray:
    t = run.train
    try:
        return load_corpus(t.corpus_path or None, n_bytes=t.corpus_bytes)
    except FileNotFoundError:
        raise ConfigError(f"train.corpus_path: no such file {t.corpus_path!r}") from None


def _windows(run: RunConfig) -> int | None:
    return run.train.eval_windows or None


def load_trained(args) -> tuple[TrainState, RunConfig]:
    """Checkpoint state plus the effective config (checkpoint config, then seed/overrides)."""
    path = args.checkpoint or os.path.join(args.out, "checkpoint.hltc")
    state = TrainState.load(path)
    run = resolve_config(args, base=state.run)
    if run.model != state.run.model:
        raise ConfigError("model overrides cannot change a trained checkpoint's architecture")
    state.run = run
    return state, run


# -- verbs --------------------------------------------------------------------------------------
def run_train(args) -> int:
    run = resolve_config(args)
    out = args.out
    write_config(run, out)
    path = os.path.join(out, "checkpoint.hltc")
    if os.path.exists(path):
        state = TrainState.load(path)
        if state.run.model != run.model:
            raise ConfigError(f"{path} was trained with a different model config; use a fresh --out")
        state.run = run
        log.info("resuming from step %d", state.step)
    else:
        state = TrainState.fresh(run)
    data = make_stream(run, corpus_for(run))
    every = max(1, run.train.total_steps // 20)

    def progress(rec):
        if not args.quiet and (rec["step"] % every == 0 or rec["step"] + 1 == run.train.total_steps):
            print(f"step={rec['step']} loss={rec['loss']:.4f} lr={rec['lr']:.3g} grad_norm={rec['grad_norm']:.3f}", flush=True)

    train_loop(state, data, out_dir=out, on_step=progress)
    if not os.path.exists(path):  # resumed at or past total_steps
        state.save(path)
    ev = evaluate_ppl(state.model, data, max_windows=_windows(run))
    write_json({"step": state.step, **ev}, os.path.join(out, "eval.json"))
    print(f"step={state.step} ppl={ev['ppl']!r}")
    return EXIT_OK


def run_eval(args) -> int:
    state, run = load_trained(args)
    write_config(run, args.out)
    ev = evaluate_ppl(state.model, make_stream(run, corpus_for(run)), max_windows=_windows(run))
    write_json({"step": state.step, **ev}, os.path.join(args.out, "eval.json"))
    print(f"ppl={ev['ppl']!r}")
    return EXIT_OK


def calibration_batches(run: RunConfig, data, batch_size: int = 8):
    """The first ``calib_sequences`` training windows in data order."""
    n = run.train.calib_sequences
    out = []
    for step in range(math.ceil(n / batch_size)):
        x, _ = data.batch(step, batch_size)
        out.append(x[: n - step * batch_size])
    return out


def run_quantize(args) -> int:
    if args.group < 1:
        raise ConfigError("--group must be >= 1")
    state, run = load_trained(args)
    write_config(run, args.out)
    data = make_stream(run, corpus_for(run))
    acc = quant.collect_hessians(state.model, calibration_batches(run, data))
    gptq = quant.quantize_model(state.model, acc, group_size=args.group, bits=args.bits)
    rtn = quant.quantize_model(state.model, acc, group_size=args.group, bits=args.bits, method="rtn")
    fp = evaluate_ppl(state.model, data, max_windows=_windows(run))
    qp = evaluate_ppl(gptq.model, data, max_windows=_windows(run))
    checkpoint.save(quant.to_checkpoint(gptq, run.to_dict()), os.path.join(args.out, f"quantized_int{args.bits}.hltc"))
    report = {
        "bits": args.bits,
        "group_size": args.group,
        "ppl_fp": fp["ppl"],
        f"ppl_int{args.bits}": qp["ppl"],
        "layers": {k: {"gptq": gptq.loss[k], "rtn": rtn.loss[k]} for k in sorted(gptq.loss)},
        "gptq_not_better": sorted(k for k in gptq.loss if gptq.loss[k] > rtn.loss[k]),
    }
    write_json(report, os.path.join(args.out, "quant_report.json"))
    print(f"ppl_fp={fp['ppl']!r} ppl_int{args.bits}={qp['ppl']!r}")
    return EXIT_OK


def run_analyze(args) -> int:
    state, run = load_trained(args)
    write_config(run, args.out)
    data = make_stream(run, corpus_for(run))
    batches = list(data.heldout_batches(16, _windows(run)))
    lens = analyze.logit_lens(state.model, batches)
    sim = analyze.cosine_map(state.model, batches)
    analyze.emit_plotdata(lens, args.out)
    analyze.emit_plotdata(sim, args.out)
    cross = "none" if sim.cross_loop is None else repr(sim.cross_loop)
    print(f"final_lens_ce={float(lens.ce[-1])!r} cross_loop={cross}")
    return EXIT_OK


def params_table(run: RunConfig) -> dict:
    counts = count_params(run.model)
    doc = {"config": run.model.to_dict(), "counts": counts}
    if run.model.arch_kind == "hyperloop":
        twin = count_params(twin_config(run.model, "looped"))
        doc["delta_vs_looped"] = counts["total"] - twin["total"]
        doc["delta_vs_looped_no_norm"] = counts["total"] - counts["hyperconn"] + counts["hyperconn_no_norm"] - twin["total"]
    return doc


def run_params(args) -> int:
    run = resolve_config(args)
    write_config(run, args.out)
    doc = params_table(run)
    write_json(doc, os.path.join(args.out, "params.json"))
    for key, value in doc["counts"].items():
        print(f"{key}={value}")
    for key in ("delta_vs_looped", "delta_vs_looped_no_norm"):
        if key in doc:
            print(f"{key}={doc[key]}")
    return EXIT_OK


def _divisors(n: int) -> list[int]:
    return [j for j in range(1, n + 1) if n % j == 0]


def sweep_variants(run: RunConfig, axis: str | None) -> list[tuple[str, RunConfig]]:
    """Named configs along one ablation axis, all sharing the base seed and budget."""
    m = run.model
    if axis is None:
        raise ConfigError(f"sweep needs --axis (one of {', '.join(SWEEP_AXES)})")
    if axis == "loops":
        if not m.is_looped:
            raise ConfigError("loops axis needs a looped or hyperloop base config")
        values = [("loops", L) for L in range(2, 7)]
    elif axis == "streams":
        if not m.uses_streams:
            raise ConfigError("streams axis needs a hyperloop or mhc base config")
        values = [("streams", n) for n in (2, 4, 6, 8, 10)]
    elif axis == "hc_placement":
        if m.arch_kind != "hyperloop":
            raise ConfigError("hc_placement axis needs a hyperloop base config")
        names = {1: "per_layer", m.middle_layers: "per_loop"}
        values = [("hc_placement", names.get(j, f"every_{j}_layers")) for j in _divisors(m.middle_layers * m.loops)]
    elif axis == "hres_mode":
        if m.arch_kind != "hyperloop":
            raise ConfigError("hres_mode axis needs a hyperloop base config")
        values = [("hres_mode", v) for v in ("identity", "sinkhorn", "diagonal")]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return [(f"{k}={v}", RunConfig(m.replace(**{k: v}), run.train)) for k, v in values]


def run_sweep(args) -> int:
    run = resolve_config(args)
    variants = sweep_variants(run, args.axis)
    write_config(run, args.out)
    corpus = corpus_for(run)
    rows = []
    for name, vrun in variants:
        out = os.path.join(args.out, name)
        write_config(vrun, out)
        data = make_stream(vrun, corpus)
        state = TrainState.fresh(vrun)
        logs = train_loop(state, data, out_dir=out)
        ev = evaluate_ppl(state.model, data, max_windows=_windows(vrun))
        counts = count_params(vrun.model)
        rows.append((name, counts["non_embedding"], logs[-1]["loss"], ev["ppl"]))
        print(f"{name} params={counts['non_embedding']} final_loss={logs[-1]['loss']:.4f} ppl={ev['ppl']!r}", flush=True)
    with open(os.path.join(args.out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,non_embedding_params,final_train_loss,heldout_ppl\n")
        for name, n, loss, ppl in rows:
            fh.write(f"{name},{n},{loss!r},{ppl!r}\n")
    return EXIT_OK


VERBS = {
    "train": run_train,
    "eval": run_eval,
    "quantize": run_quantize,
    "analyze": run_analyze,
    "params": run_params,
    "sweep": run_sweep,
}


def _thread_limit() -> int | None:
    raw = os.environ.get("HLT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"HLT_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"HLT_THREADS must be a positive integer, got {raw!r}")
    return value


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        threads = _thread_limit()
        with threadpool_limits(limits=threads):
            return VERBS[args.verb](args)
    except (ConfigError, CheckpointError, InputError) as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (HyperloopError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: runtime: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
