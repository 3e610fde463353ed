"""Command-line entry points: prepare, synth, train, eval, inspect.

Every command accepts ``--config PATH``, ``--seed N``, ``--out DIR`` and
repeatable ``--set KEY=VALUE``; overrides beat the config file, which beats
the built-in defaults.  ``STARHIT_THREADS`` caps BLAS threads (0 = auto).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, formats, training
from .numerics import GradientError, NumericsError, fd_check

log = logging.getLogger("starhit")

DATASET_FILE = "dataset.bin"
BEST_CKPT = "best.ckpt"
LAST_CKPT = "last.ckpt"
HISTORY_FILE = "history.csv"


class CliError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starhit", description="Hierarchical next-POI transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, window and split a raw check-in file")
    p.add_argument("input")
    p.add_argument("--format", default="generic_csv", choices=dataio.FORMATS)
    p.add_argument("--columns", help="comma-separated column indices of user,poi,lat,lon,time")
    _common(p)

    p = sub.add_parser("synth", help="generate a planted-hierarchy dataset")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--regions", type=int, default=2)
    p.add_argument("--pois-per-region", type=int, default=4)
    p.add_argument("--days", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.1)
    _common(p)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--data", help="prepared dataset file (overrides config dataset)")
    p.add_argument("--grad-check", action="store_true", help="finite-difference check before training")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on one split, next to the frequency baseline")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=formats.SPLITS)
    p.add_argument("--data", help="prepared dataset file (default: the one recorded in the checkpoint)")
    _common(p)

    p = sub.add_parser("inspect", help="export attention, partition and correlation CSVs for one sample")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=formats.SPLITS)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--data", help="prepared dataset file (default: the one recorded in the checkpoint)")
    _common(p)
    return parser


def _run_config(args) -> formats.RunConfig:
    return formats.load_run_config(args.config, args.overrides, seed=args.seed, out_dir=args.out)


def _out_dir(cfg: formats.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stats_text(stats: dict) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in stats.items())


def cmd_prepare(args) -> int:
    cfg = _run_config(args)
    columns = None
    if args.columns:
        columns = [int(c) for c in args.columns.split(",")]
    records = dataio.load_checkins(args.input, args.format, columns)
    kept = dataio.filter_min_support(records, cfg.min_count)
    if not kept:
        raise CliError(f"dataset is empty after filtering with min_count={cfg.min_count}")
    splits = dataio.prepare_splits(records, cfg.L_max, cfg.min_count)
    out = _out_dir(cfg)
    formats.save_dataset(out / DATASET_FILE, splits)
    stats = dataio.dataset_stats(kept)
    stats.update(train_samples=len(splits.train), valid_samples=len(splits.valid), test_samples=len(splits.test))
    text = _stats_text(stats)
    (out / "stats.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    seed = args.seed if args.seed is not None else dataio.SynthSpec.seed
    spec = dataio.SynthSpec(args.users, args.regions, args.pois_per_region, args.days, args.noise, seed)
    ds = dataio.synth_dataset(spec)
    out = _out_dir(cfg)
    records = [c for t in ds.trajectories for c in t.checkins]
    dataio.write_checkins(out / "checkins.csv", records)
    dataio.write_segments(out / "segments.csv", ds.segments)
    splits = dataio.prepare_splits(records, cfg.L_max, cfg.min_count)
    formats.save_dataset(out / DATASET_FILE, splits)
    sys.stdout.write(f"checkins={len(records)}\nsegments={len(ds.segments)}\nnoise_visits={len(ds.noise_log)}\n")
    return 0


def _load_data(path: str):
    if not path:
        raise CliError("no dataset given; pass --data or --set dataset=PATH")
    return formats.load_dataset(path)


def _grad_check(splits, model_cfg, params, seed: int) -> None:
    import dataclasses

    from .model import make_batch

    # the longest windows give gradients well above the difference quotient's noise floor
    longest = sorted(range(len(splits.train)), key=lambda i: (-splits.train[i].valid_len, i))[:2]
    batch = make_batch([splits.train[i] for i in longest])
    probe_cfg = dataclasses.replace(model_cfg, dropout=0.0)
    store = params.copy(np.float64)
    report = fd_check(
        lambda s: training.batch_loss(batch, s, probe_cfg, "softmax_bce"), store, epsilon=1e-5, seed=seed, oracle_dtype=np.longdouble
    )
    log.info("gradient check: max relative error %.3g (%s), %d coordinates", report.max_rel_err, report.offending_param, report.n_checked)
    if not report.passed:
        raise GradientError(f"gradient check failed: relative error {report.max_rel_err:.3g} on {report.offending_param}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.data:
        cfg.dataset = str(args.data)
    if args.grad_check:
        cfg.grad_check = True
    start_epoch, params, opt = 0, None, None
    if args.resume:
        ck = formats.load_checkpoint(args.resume)
        # model shape comes from the checkpoint; the schedule continues from its step
        resumed = ck.run_cfg
        for key in ("epochs", "batch_size", "seed", "patience", "checkpoint_every", "out_dir", "grad_check"):
            setattr(resumed, key, getattr(cfg, key))
        if cfg.dataset:
            resumed.dataset = cfg.dataset
        cfg = resumed
        params, opt, start_epoch = ck.params, ck.opt_state, ck.epoch
    splits = _load_data(cfg.dataset)
    model_cfg = cfg.model_config(len(splits.vocab))
    train_cfg = cfg.train_config()
    if params is None:
        params = training.xavier_init(model_cfg, cfg.seed)
    if opt is None:
        opt = training.OptimState.for_store(params, model_cfg.d, coef=cfg.lr_coef, warmup_step=cfg.warmup)
    if cfg.grad_check:
        _grad_check(splits, model_cfg, params, cfg.seed)

    out = _out_dir(cfg)
    formats.write_run_config(out / "config.txt", cfg)
    history_path = out / HISTORY_FILE
    if not args.resume and history_path.exists():
        history_path.unlink()

    def on_epoch(rec, p, o):
        with open(history_path, "a", encoding="utf-8") as fh:
            fh.write(rec.to_line() + "\n")
        if cfg.checkpoint_every and rec.epoch % cfg.checkpoint_every == 0:
            formats.save_checkpoint(out / f"epoch{rec.epoch}.ckpt", p, cfg, model_cfg.n_pois, o, rec.epoch)

    try:
        result = training.train(splits, model_cfg, train_cfg, params, opt, start_epoch, on_epoch)
    except training.TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}") from exc
    last_epoch = result.history[-1].epoch if result.history else start_epoch
    formats.save_checkpoint(out / BEST_CKPT, result.params, cfg, model_cfg.n_pois, None, result.best_epoch)
    formats.save_checkpoint(out / LAST_CKPT, result.last_params, cfg, model_cfg.n_pois, result.opt_state, last_epoch)
    sys.stdout.write(f"best_epoch={result.best_epoch}\ncheckpoint={out / BEST_CKPT}\nhistory={history_path}\n")
    return 0


def _checkpoint_and_split(args):
    ck = formats.load_checkpoint(args.checkpoint)
    path = args.data or ck.run_cfg.dataset
    splits = _load_data(path)
    if len(splits.vocab) != ck.model_cfg.n_pois:
        raise CliError(f"checkpoint expects {ck.model_cfg.n_pois} POIs, dataset has {len(splits.vocab)}")
    samples = getattr(splits, args.split)
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    if samples[0].poi_ids.shape[0] != ck.model_cfg.L_max:
        raise CliError(f"dataset windows have length {samples[0].poi_ids.shape[0]}, checkpoint expects {ck.model_cfg.L_max}")
    return ck, samples


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ck, samples = _checkpoint_and_split(args)
    model_rep = evalkit.evaluate(ck.params, ck.model_cfg, samples)
    base_rep = evalkit.mflm_evaluate(samples, ck.model_cfg.n_pois)
    text = model_rep.to_text("model.") + base_rep.to_text("mflm.")
    out = _out_dir(cfg)
    (out / f"eval_{args.split}.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    from .model import forward, make_batch
    from .numerics import no_grad

    cfg = _run_config(args)
    ck, samples = _checkpoint_and_split(args)
    if not 0 <= args.sample < len(samples):
        raise CliError(f"sample {args.sample} out of range for {args.split} split of {len(samples)}")
    sample = samples[args.sample]
    out = _out_dir(cfg)
    with no_grad():
        _, trace = forward(make_batch([sample]), ck.params, ck.model_cfg, train=False)
    written = evalkit.export_trace(trace, out)
    corr = evalkit.correlation_matrix(sample, ck.params, ck.model_cfg)
    np.savetxt(out / "correlation.csv", corr, delimiter=",", fmt="%.10g")
    written.append(out / "correlation.csv")
    sys.stdout.write("".join(f"{p}\n" for p in written))
    return 0


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def _thread_limit():
    raw = os.environ.get("STARHIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"STARHIT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("STARHIT_THREADS must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CliError, formats.ConfigError, formats.ContainerError, dataio.DataFormatError, GradientError, NumericsError,
            ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
