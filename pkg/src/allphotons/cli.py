"""Command-line entry point: ``allphotons <mode> [--config F] [--out DIR] [--seed N] [--threads N]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error (including a
missing or unparsable input file), 4 insufficient SNR for the absorption
estimate, 5 numerical failure. Wall-clock timings go to stderr only so that
repeated runs produce byte-identical files.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from .config import MODES, ConfigError, load_config
from .diffusion import sample_kernel
from .estimation import InsufficientSNR, alternate, initial_mask
from .io import VolumeFormatError, read_volume, write_csv, write_image, write_json, write_pgm, write_volume
from .montecarlo import trace
from .reconstruction import NumericalFailure, SystemMatrix, admm_solve, tikhonov_solve, total_variation

__all__ = ["main", "run", "cli_simulate", "cli_kernel", "cli_estimate", "cli_reconstruct", "cli_pipeline"]

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SNR, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("allphotons")


def _prepare(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "config.json")
    write_json(path, cfg.to_dict())
    return cfg.output_dir


def _load_measurement(cfg):
    m = read_volume(cfg.input)
    geo = cfg.scene_geometry()
    if m.shape != geo.shape:
        raise ConfigError(f"measurement shape {m.shape} does not match geometry {geo.shape}")
    if not (np.isclose(m.pixel_size, geo.pixel_size) and np.isclose(m.bin_width, geo.bin_width)):
        raise ConfigError(
            f"measurement sampling ({m.pixel_size} mm, {m.bin_width} ps) does not match geometry "
            f"({geo.pixel_size} mm, {geo.bin_width} ps)"
        )
    return m


def _correlation(a, b):
    a, b = np.ravel(a), np.ravel(b)
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _write_mask(out, mask):
    write_image(os.path.join(out, "mask.ssv"), mask)
    write_pgm(os.path.join(out, "mask.pgm"), mask.data)


def cli_simulate(cfg):
    out = _prepare(cfg)
    t0 = time.perf_counter()
    mask = cfg.mask()
    result = trace(cfg.mc_config(mask=mask), threads=cfg.threads)
    log.info("simulate: %.2f s", time.perf_counter() - t0)
    write_volume(os.path.join(out, "measurement.ssv"), result.measurement)
    write_json(os.path.join(out, "counters.json"), result.counters.as_dict())
    write_image(os.path.join(out, "target.ssv"), mask)
    write_pgm(os.path.join(out, "target.pgm"), mask.data)
    return result


def cli_kernel(cfg):
    out = _prepare(cfg)
    geo = cfg.scene_geometry()
    props = cfg.optical_properties()
    d = geo.d1 if cfg.kernel.slab == "d1" else geo.d2
    k = sample_kernel(props, d, geo, cfg.model.image_pairs, cfg.model.radius, cfg.kernel.time_offset)
    write_volume(os.path.join(out, "kernel.ssv"), k)
    t = (np.arange(geo.nt) + cfg.kernel.time_offset) * geo.bin_width
    x = geo.x_centers()
    iy = geo.source_pixel[1]
    write_csv(os.path.join(out, "kernel_xt.csv"), ["x_mm", "t_ps", "value"],
              [(x[i], t[j], k.data[i, iy, j]) for i in range(geo.nx) for j in range(geo.nt)])
    hist = k.data.sum(axis=(0, 1))
    peak = hist.max()
    norm = hist / peak if peak > 0 else hist
    write_csv(os.path.join(out, "kernel_histogram.csv"), ["t_ps", "value", "normalized"],
              [(t[j], hist[j], norm[j]) for j in range(geo.nt)])
    return k


def _estimate(cfg, measurement, out, truth=None):
    scene = cfg.scene()
    rep = alternate(measurement, scene, cfg.estimation_config())
    for phase, seconds in rep.timings.items():
        log.info("estimate %s: %.2f s", phase, seconds)
    report = {
        "mu_a_hat": rep.mu_a_hat,
        "mu_a_slope": rep.mu_a_slope,
        "mu_s_prime_hat": rep.mu_s_prime_hat,
        "iterations": len(rep.loss_trajectory),
        "final_loss": rep.loss_trajectory[-1][3] if rep.loss_trajectory else None,
        "final_admm_objective": rep.admm_objective[-1] if rep.admm_objective else None,
    }
    if truth is not None:
        report["mask_correlation"] = _correlation(rep.mask.data, truth.data)
    write_json(os.path.join(out, "report.json"), report)
    write_csv(os.path.join(out, "loss.csv"), ["phase", "iteration", "mu_s_prime", "loss"], rep.loss_trajectory)
    write_csv(os.path.join(out, "objective.csv"), ["iteration", "objective"], enumerate(rep.admm_objective))
    _write_mask(out, rep.mask)
    return rep


def cli_estimate(cfg):
    measurement = _load_measurement(cfg)
    out = _prepare(cfg)
    return _estimate(cfg, measurement, out)


def cli_reconstruct(cfg):
    """Mask recovery with the optical properties taken as known from the config."""
    measurement = _load_measurement(cfg)
    out = _prepare(cfg)
    t0 = time.perf_counter()
    A = SystemMatrix(cfg.scene())
    b = measurement.data.ravel(order="F")
    nb = np.linalg.norm(b)
    if not nb > 0:
        raise InsufficientSNR("measurement has no positive counts")
    b = b / nb
    summary = {"solver": cfg.reconstruction.solver}
    if cfg.reconstruction.solver == "tikhonov":
        v = tikhonov_solve(A, b, cfg.reconstruction.tikhonov_lambda, clamp=False)
        objective = []
    else:
        admm = cfg.admm_config()
        init = A.from_mask(initial_mask(measurement))
        info = admm_solve(A, b, admm.prior(cfg.geometry.nx, cfg.geometry.ny), admm, init=init, clamp=False, return_info=True)
        v, objective = info.v_raw, info.objective
        summary.update(iterations=info.iterations, converged=bool(info.converged))
    mask = A.to_mask(v)
    log.info("reconstruct: %.2f s", time.perf_counter() - t0)
    summary["total_variation"] = total_variation(mask)
    write_json(os.path.join(out, "reconstruction.json"), summary)
    write_csv(os.path.join(out, "objective.csv"), ["iteration", "objective"], enumerate(objective))
    _write_mask(out, mask)
    return mask


def cli_pipeline(cfg):
    """Simulate, then estimate from the simulated measurement, in one directory."""
    result = cli_simulate(cfg)
    return _estimate(cfg, result.measurement, cfg.output_dir, truth=cfg.mask())


COMMANDS = {
    "simulate": cli_simulate,
    "kernel": cli_kernel,
    "estimate": cli_estimate,
    "reconstruct": cli_reconstruct,
    "pipeline": cli_pipeline,
}


def run(cfg):
    return COMMANDS[cfg.mode](cfg)


def build_parser():
    parser = argparse.ArgumentParser(prog="allphotons", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="JSON run file; omitted fields take their defaults")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="RNG seed, unsigned 64-bit (overrides seed)")
    parser.add_argument("--threads", type=int, help="worker threads for the Monte Carlo tracer")
    parser.add_argument("--input", help="measurement file for estimate/reconstruct (overrides input)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log phase timings to stderr")
    return parser


def _configure_logging(verbose):
    # own handler on the package logger: basicConfig is a no-op once the root has handlers
    for h in [h for h in log.handlers if getattr(h, "_allphotons_cli", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    handler._allphotons_cli = True
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = load_config(args.config, {
            "mode": args.mode, "output_dir": args.out, "seed": args.seed,
            "threads": args.threads, "input": args.input,
        })
        run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except VolumeFormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InsufficientSNR as exc:
        print(f"insufficient SNR: {exc}", file=sys.stderr)
        return EXIT_SNR
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
