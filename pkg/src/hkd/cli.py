"""``hkd`` command line covering the pipeline from teacher data to spectral analysis.

Exit codes: 0 ok, 2 configuration or argument error, 3 I/O or file format
error, 4 numeric failure.  ``HKD_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .koopman import KoopmanOverflowError, write_spectra_csv
from .numcore import ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _run_config(path) -> RunConfig:
    try:
        return RunConfig.load(path)
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror or e}") from None


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _announce(*paths) -> None:
    for p in paths:
        print(p)


# --- subcommands -------------------------------------------------------------------

def cmd_gen_data(a) -> None:
    from .persist import write_dataset
    from .teacher import Schedule, generate_dataset, make_gmm

    run = _run_config(a.config)
    t = run.teacher
    seed = t.seed if a.seed is None else a.seed
    gmm = make_gmm(run.model, t)
    ds = generate_dataset(gmm, Schedule(run.model.epsilon, run.model.horizon), t.n_traj, t.n_grid,
                          t.substeps, seed)
    write_dataset(ds, a.out)
    print(f"wrote {a.out}: n_traj={ds.n_traj} grid={ds.n_grid} "
          f"t=[{ds.epsilon:g},{ds.horizon:g}] schedule=VE sigma(t)=t seed={seed}")


def metrics_path_for(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".metrics.csv")


def cmd_train(a) -> None:
    from .persist import read_dataset
    from .trainer import DatasetMismatchError, check_dataset, train

    run = _run_config(a.config)
    ds = read_dataset(a.data)
    try:
        check_dataset(run, ds)
    except DatasetMismatchError as e:
        raise ConfigError(str(e)) from None
    metrics = a.metrics or metrics_path_for(a.out)
    res = train(run, ds, checkpoint_path=a.out, metrics_path=metrics)
    final = res.history[-1] if res.history else float("nan")
    print(f"trained {len(res.history)} iterations, final loss {final:.6g}")
    _announce(a.out, metrics)


def _checkpoint(path):
    from .persist import read_checkpoint
    from .trainer import load

    return load(read_checkpoint(path))


def _sheet(path, images, ncol=None) -> None:
    from .persist import contact_sheet, write_png

    write_png(path, contact_sheet(images, ncol))


def cmd_sample(a) -> None:
    from .trainer import one_step_sample

    model = _checkpoint(a.ckpt)
    x = one_step_sample(model, a.n, a.seed)
    out = _outdir(a.out)
    _sheet(out / "samples.png", x)
    np.save(out / "samples.npy", x)
    _announce(out / "samples.png", out / "samples.npy")


def cmd_analyze_spectrum(a) -> None:
    from .koopman import koopman_eigenvalues

    model = _checkpoint(a.ckpt)
    cfg = model.cfg
    out = _outdir(a.out)
    dt = cfg.horizon - cfg.epsilon
    write_spectra_csv(out / "spectra.csv", model.koopman, dt)
    for op in model.koopman:
        ev = koopman_eigenvalues(op, dt)
        print(f"level {op.level}: alpha in [{op.alpha.data.min():.4g}, {op.alpha.data.max():.4g}], "
              f"|lambda| in [{ev.magnitude.min():.4g}, {ev.magnitude.max():.4g}]")
    _announce(out / "spectra.csv")


def cmd_band_decode(a) -> None:
    from .analysis import BAND_NAMES, band_decode
    from .trainer import draw_noise

    model = _checkpoint(a.ckpt)
    x_T = draw_noise(model, a.n, a.seed)
    out = _outdir(a.out)
    paths = []
    for name in ("all",) + BAND_NAMES:
        p = out / f"band_{name}.png"
        _sheet(p, band_decode(model, x_T, name))
        paths.append(p)
    _announce(*paths)


def cmd_ce(a) -> None:
    from .analysis import cumulative_effect
    from .trainer import draw_noise

    model = _checkpoint(a.ckpt)
    rep = cumulative_effect(model, draw_noise(model, a.n, a.seed))
    out = _outdir(a.out)
    rep.write_csv(out / "ce.csv")
    _announce(out / "ce.csv")


def _region(spec: str, size: int) -> np.ndarray | None:
    from .analysis import lower_left_region

    if spec == "full":
        return None
    if spec == "lower-left":
        return lower_left_region(size)
    try:
        from PIL import Image

        with Image.open(spec) as im:
            mask = np.asarray(im.convert("L")) >= 128
    except OSError as e:
        raise OSError(f"cannot read region mask {spec}: {e}") from None
    if mask.shape != (size, size):
        raise UsageError(f"region mask is {mask.shape[0]}x{mask.shape[1]}, images are {size}x{size}")
    return mask


def cmd_edit(a) -> None:
    from .analysis import EditSpec, bands_for, frequency_edit
    from .trainer import draw_noise

    if not 0.0 <= a.ratio <= 1.0:
        raise UsageError(f"--ratio must lie in [0, 1], got {a.ratio}")
    model = _checkpoint(a.ckpt)
    cfg = model.cfg
    spec = EditSpec(bands="all" if a.band == "all" else bands_for(model, a.band), ratio=a.ratio,
                    region=_region(a.region, cfg.image_size),
                    t_edit=None if a.t_edit is None else a.t_edit)
    try:
        spec.validate(model)
    except (ValueError, ShapeError) as e:
        raise UsageError(str(e)) from None
    x = frequency_edit(model, draw_noise(model, a.n, a.seed), draw_noise(model, a.n, a.ref_seed), spec)
    out = _outdir(a.out)
    _sheet(out / "edit.png", x)
    _announce(out / "edit.png")


def cmd_consistency(a) -> None:
    import csv

    from .analysis import consistency_series, series_mse
    from .persist import read_dataset
    from .trainer import model_grid_times

    model = _checkpoint(a.ckpt)
    ds = read_dataset(a.data)
    if not 0 <= a.index < ds.n_traj:
        raise UsageError(f"--index {a.index} outside [0, {ds.n_traj})")
    times = model_grid_times(model.cfg, ds)
    states = ds.states[a.index]
    series = consistency_series(model, states, times)
    out = _outdir(a.out)
    _sheet(out / "consistency.png", np.concatenate([states, np.stack([img for _, img in series])]),
           ncol=len(times))
    with open(out / "consistency.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("t", "mse_to_target"))
        for (t, _), m in zip(series, series_mse(series, states[-1])):
            wr.writerow((repr(t), repr(float(m))))
    _announce(out / "consistency.png", out / "consistency.csv")


def cmd_eval(a) -> None:
    from .analysis import fd_lite
    from .teacher import Schedule, make_gmm, terminal_samples
    from .trainer import PerceptualExtractor, one_step_sample

    model = _checkpoint(a.ckpt)
    run = model.run
    n = a.n or run.analysis.n_eval
    ref_seed = run.analysis.eval_seed if a.ref_seed is None else a.ref_seed
    ext = PerceptualExtractor.from_config(run)
    gmm = make_gmm(run.model, run.teacher)
    teacher = terminal_samples(gmm, Schedule(run.model.epsilon, run.model.horizon), n, ref_seed)
    fd = fd_lite(one_step_sample(model, n, a.seed), teacher, ext)
    print(f"fd_lite {fd:.6g}")


# --- parser ---------------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Appends the default unless the help text already states a symbolic one."""

    def _get_help_string(self, action):
        text = action.help or ""
        return text if "(default:" in text else super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="hkd", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        s.set_defaults(fn=fn)
        return s

    s = add("gen-data", cmd_gen_data, "integrate teacher trajectories and write a dataset")
    s.add_argument("--config", required=True, help="run config file")
    s.add_argument("--out", required=True, help="dataset path")
    s.add_argument("--seed", type=int, default=None, help="trajectory seed (default: teacher.seed)")

    s = add("train", cmd_train, "train a model on a trajectory dataset")
    s.add_argument("--config", required=True, help="run config file")
    s.add_argument("--data", required=True, help="dataset path")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", default=None, help="metrics CSV (default: <out stem>.metrics.csv)")

    def model_cmd(name, fn, help_, n=16):
        s = add(name, fn, help_)
        s.add_argument("--ckpt", required=True, help="checkpoint path")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--n", type=int, default=n, help="number of images")
        s.add_argument("--seed", type=int, default=0, help="noise seed")
        return s

    model_cmd("sample", cmd_sample, "one-step samples as a contact sheet")
    s = add("analyze-spectrum", cmd_analyze_spectrum, "export Koopman eigenvalues per location")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--out", required=True, help="output directory")
    model_cmd("band-decode", cmd_band_decode, "decode all, low, mid and high frequency bands")
    model_cmd("ce", cmd_ce, "cumulative effect of each band over the time grid", n=64)
    s = model_cmd("edit", cmd_edit, "blend reference latents into samples")
    s.add_argument("--ref-seed", type=int, default=1, help="reference noise seed")
    s.add_argument("--ratio", type=float, default=0.5, help="mixing ratio in [0, 1]")
    s.add_argument("--band", choices=("all", "low", "mid", "high"), default="high",
                   help="frequency band to blend")
    s.add_argument("--region", default="lower-left",
                   help="full, lower-left or a mask PNG of image size")
    s.add_argument("--t-edit", type=float, default=None, help="intervention time (default: midpoint)")
    s = add("consistency", cmd_consistency, "reconstruct x_eps from every stored time of a trajectory")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset path")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--index", type=int, default=0, help="trajectory index")
    s = add("eval", cmd_eval, "FD-lite between one-step samples and teacher samples")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--n", type=int, default=None, help="samples per side (default: analysis.n_eval)")
    s.add_argument("--seed", type=int, default=0, help="model noise seed")
    s.add_argument("--ref-seed", type=int, default=None,
                   help="teacher noise seed (default: analysis.eval_seed)")
    return p


def _thread_limit():
    n = os.environ.get("HKD_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    from .persist import PersistError
    from .trainer import DatasetMismatchError, NonFiniteLossError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
    except ValueError:
        print("error: HKD_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except (ConfigError, UsageError, DatasetMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PersistError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, KoopmanOverflowError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
