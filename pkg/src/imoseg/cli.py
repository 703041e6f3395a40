"""Command-line entry point: ``imoseg <subcommand> ...``.

Exit codes: 0 success, 1 internal or numeric failure, 2 usage or parse failure.
"""

from __future__ import annotations

import argparse
import collections
import csv
import dataclasses
import logging
import math
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ENV_PREFIX, ConfigError, PipelineConfig, load_config
from .egomotion import EgomotionError, estimate_egomotion
from .events import EventError, build_volume, project_events, slice_stream
from .formats import (
    FormatError,
    RasterReader,
    RasterWriter,
    dump_kv,
    read_events,
    read_raster,
    write_events,
)
from .geometry import DepthMap, FlowField, GeometryError
from .labeler import IMO, INVALID
from .metrics import build_iou_report
from .pipeline import label_slice
from .simulator import SceneSpecError, generate, spec_from_dict, spec_to_dict

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("imoseg")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

_EPILOG = f"""\
environment:
  Any config key can be overridden with {ENV_PREFIX}<SECTION>__<KEY>, e.g.
    {ENV_PREFIX}RANSAC__MAX_ITERATIONS=500
    {ENV_PREFIX}LABELER__EPS_SEPARATION=0.5
    {ENV_PREFIX}PIPELINE__WORKERS=4
  Values are parsed as TOML literals; overrides win over the --config file.

exit codes:
  0 success, 1 internal or numeric failure, 2 usage or parse failure
"""

_THETA = ("v_x", "v_y", "v_z", "omega_x", "omega_y", "omega_z")


class UsageError(Exception):
    """Bad inputs detected after argument parsing; maps to exit code 2."""


class NumericFailure(Exception):
    """A computed check did not hold; maps to exit code 1."""


def _config(args) -> PipelineConfig:
    return load_config(getattr(args, "config", None), os.environ)


def _slice_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _with_nan(arr, valid):
    return np.where(valid, arr, np.nan).astype(np.float32)


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    text = Path(args.spec).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{args.spec}: {exc}") from None
    base = spec_from_dict(data)
    if args.seed is not None:
        base = dataclasses.replace(base, rng_seed=args.seed)
    if args.slices < 1:
        raise UsageError("--slices must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = base.intrinsics.shape
    n = args.slices
    writers = {
        "flow": RasterWriter(out / "flow.evmg", 2 * n, h, w, "f32"),
        "clean_flow": RasterWriter(out / "clean_flow.evmg", 2 * n, h, w, "f32"),
        "rigid_flow": RasterWriter(out / "rigid_flow.evmg", 2 * n, h, w, "f32"),
        "depth": RasterWriter(out / "depth.evmg", n, h, w, "f32"),
        "gt_mask": RasterWriter(out / "gt_mask.evmg", n, h, w, "u8"),
    }
    events = []
    try:
        for k in range(n):
            spec = dataclasses.replace(
                base, rng_seed=base.rng_seed + k, t_start=base.t_start + k * base.dt
            )
            b = generate(spec)
            for name in ("flow", "clean_flow", "rigid_flow"):
                f = getattr(b, name)
                writers[name].write(np.stack([_with_nan(f.u, f.valid), _with_nan(f.v, f.valid)]))
            writers["depth"].write(_with_nan(b.depth.z, b.depth.valid))
            writers["gt_mask"].write(b.imo_mask.label)
            events.append(b.events.events)
            log.info("simulate slice=%d events=%d", k, len(b.events))
    finally:
        for wr in writers.values():
            wr.close()
    write_events(np.concatenate(events), out / "events.evmg")
    meta = {
        "slices": n,
        "dt": base.dt,
        "t_start": base.t_start,
        "seed": base.rng_seed,
        "camera_velocity": {"v": base.camera_velocity.v.tolist(), "omega": base.camera_velocity.omega.tolist()},
        "scene": {k: v for k, v in spec_to_dict(base).items() if not isinstance(v, (dict, list))},
        "intrinsics": spec_to_dict(base)["intrinsics"],
    }
    (out / "meta.txt").write_text(dump_kv(meta))
    print(f"wrote {n} slice(s) to {out}")
    return EXIT_OK


# -- shared flow/depth streaming ----------------------------------------------


class _FlowDepthStream:
    """Per-slice access to a 2S-channel flow raster and an S- or 1-channel depth raster."""

    def __init__(self, flow_path, depth_path, cfg: PipelineConfig):
        self.flow = RasterReader(flow_path, "f32")
        try:
            self.depth = RasterReader(depth_path, "f32")
        except BaseException:
            self.flow.close()
            raise
        self.cfg = cfg
        intr = cfg.intrinsics
        for name, r in (("flow", self.flow), ("depth", self.depth)):
            if (r.height, r.width) != intr.shape:
                self.close()
                raise UsageError(
                    f"{name} raster is {r.height}x{r.width} but intrinsics are {intr.height}x{intr.width}"
                )
        if self.flow.channels % 2:
            self.close()
            raise UsageError(f"flow raster has {self.flow.channels} channels, expected an even count")
        self.slices = self.flow.channels // 2
        if self.depth.channels not in (1, self.slices):
            self.close()
            raise UsageError(f"depth has {self.depth.channels} channels for {self.slices} flow slices")

    def read(self, k):
        uv = self.flow.read(2 * k, 2).astype(np.float64)
        z = self.depth.read(k if self.depth.channels > 1 else 0, 1)[0].astype(np.float64)
        valid = np.isfinite(uv[0]) & np.isfinite(uv[1])
        flow = FlowField(np.where(valid, uv[0], 0.0), np.where(valid, uv[1], 0.0), valid, self.cfg.events.period)
        return flow, DepthMap.from_array(z, self.cfg.depth.z_max)

    def close(self):
        self.flow.close()
        self.depth.close()


def _ordered_map(fn, items, workers):
    """Map ``fn`` over ``items`` with at most ``2 * workers`` in flight; yields in input order."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = collections.deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# -- egomotion ----------------------------------------------------------------


def cmd_egomotion(args) -> int:
    cfg = _config(args)
    stream = _FlowDepthStream(args.flow, args.depth, cfg)
    rows = []
    period = cfg.events.period
    lock = threading.Lock()

    def work(k):
        with lock:
            flow, depth = stream.read(k)
        ransac = dataclasses.replace(cfg.ransac, rng_seed=_slice_seed(cfg.ransac.rng_seed, k))
        try:
            est = estimate_egomotion(flow, depth, cfg.intrinsics, ransac)
        except EgomotionError as exc:
            return k, None, str(exc)
        return k, est, ""

    try:
        for k, est, msg in _ordered_map(work, range(stream.slices), cfg.pipeline.workers):
            t = args.t0 + k * period
            if est is None:
                log.warning("egomotion slice=%d status=failed reason=%r", k, msg)
                rows.append([k, t, "failed"] + [math.nan] * 6 + [math.nan, 0])
            else:
                rows.append(
                    [k, t, "ok"] + est.velocity.as_vector().tolist() + [est.inlier_fraction, est.iterations_used]
                )
    finally:
        stream.close()

    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "t", "status", *_THETA, "inlier_fraction", "iterations"])
        for r in rows:
            w.writerow([r[0], repr(float(r[1])), r[2]] + [repr(float(x)) for x in r[3:10]] + [r[10]])
    if args.plot:
        from .plots import plot_velocity_trace

        png = out.with_suffix(".png")
        plot_velocity_trace(
            [r[1] for r in rows], [r[3:9] for r in rows], [r[2] == "failed" for r in rows], png
        )
        log.info("egomotion plot=%s", png)
    failed = sum(r[2] == "failed" for r in rows)
    print(f"{len(rows)} slice(s), {failed} failed -> {out}")
    return EXIT_OK


# -- label --------------------------------------------------------------------


def _meta_record(k, t, res):
    rec = {"index": k, "t": t, "status": res.status}
    d = res.decision
    rec.update(
        threshold=d.threshold if d else math.nan,
        total_variance=d.total_variance if d else math.nan,
        between_class_variance=d.between_class_variance if d else math.nan,
        accepted=bool(d.accepted) if d else False,
        reason=d.rejection_reason.value if d else "egomotion_failed",
    )
    if res.estimate is not None:
        rec.update(dict(zip(_THETA, res.estimate.velocity.as_vector().tolist())))
        rec["inlier_fraction"] = res.estimate.inlier_fraction
    if res.message:
        rec["message"] = res.message
    return rec


def cmd_label(args) -> int:
    cfg = _config(args)
    stream = _FlowDepthStream(args.flow, args.depth, cfg)
    intr = cfg.intrinsics
    period = cfg.events.period
    records = []
    lock = threading.Lock()

    def work(k):
        start = time.perf_counter()
        with lock:
            flow, depth = stream.read(k)
        ransac = dataclasses.replace(cfg.ransac, rng_seed=_slice_seed(cfg.ransac.rng_seed, k))
        t = args.t0 + k * period
        res = label_slice(flow, depth, cfg, ransac, slice_time=t)
        if res.status == "labeled":
            mask = res.mask.label
        else:
            # no pseudo-label for this slice
            mask = np.full(intr.shape, INVALID, dtype=np.uint8)
        return k, t, res, mask, start

    counts = collections.Counter()
    t_begin = time.perf_counter()
    try:
        with RasterWriter(args.out_mask, stream.slices, intr.height, intr.width, "u8") as writer:
            for k, t, res, mask, start in _ordered_map(work, range(stream.slices), cfg.pipeline.workers):
                writer.write(mask)
                ms = (time.perf_counter() - start) * 1e3
                counts[res.status] += 1
                log.info("label slice=%d t=%.6f status=%s ms=%.3f", k, t, res.status, ms)
                records.append(_meta_record(k, t, res))
    finally:
        stream.close()
    elapsed = time.perf_counter() - t_begin
    n = len(records)
    rate = n / elapsed if elapsed > 0 else math.inf
    log.info("label summary slices=%d seconds=%.6f slices_per_second=%.3f", n, elapsed, rate)
    Path(args.out_meta).write_text(dump_kv({"slices": n, "slice": records}) if records else dump_kv({"slices": 0}))
    print(
        f"{n} slice(s): {counts['labeled']} labeled, {counts['rejected']} rejected, "
        f"{counts['failed']} failed ({rate:.1f} slices/s)"
    )
    return EXIT_OK


# -- volume -------------------------------------------------------------------


def cmd_volume(args) -> int:
    cfg = _config(args)
    intr = cfg.intrinsics
    bins = cfg.events.bins
    ev = read_events(args.events)
    slices = slice_stream(ev, cfg.events.period, args.t0)
    total_in = 0.0
    total_out = 0.0
    n = max(1, len(slices))
    with RasterWriter(args.out, bins * n, intr.height, intr.width, "f32") as writer:
        if not slices:
            writer.write(np.zeros((bins, intr.height, intr.width), dtype=np.float32))
        for sl in slices:
            vol = build_volume(sl, bins, intr.width, intr.height)
            total_in += float(sl.events["p"].astype(np.float64).sum())
            total_out += float(vol.bins.sum())
            writer.write(vol.bins.astype(np.float32))
    diff = abs(total_in - total_out)
    tol = 1e-9 * max(1.0, float(np.abs(ev["p"]).sum()) if ev.size else 1.0)
    print(f"mass: events={total_in:.12g} volume={total_out:.12g} |diff|={diff:.3g}")
    if not diff <= tol:
        raise NumericFailure(f"mass not conserved: |diff| {diff:.3g} > {tol:.3g}")
    print(f"wrote {n} volume(s) x {bins} bins -> {args.out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _config(args)
    gt = read_raster(args.gt_mask, "u8")
    pred = read_raster(args.pred_mask, "u8")
    if gt.shape != pred.shape:
        raise UsageError(f"gt mask {gt.shape} and prediction {pred.shape} differ in shape")
    n, h, w = gt.shape
    ev = read_events(args.events)
    period = cfg.events.period
    slices = {}
    if ev.size:
        for k, sl in enumerate(slice_stream(ev, period, args.t0)):
            if k < n:
                slices[k] = sl

    def items():
        for k in range(n):
            t = args.t0 + k * period
            hit = project_events(slices[k], w, h) if k in slices else np.zeros((h, w), dtype=bool)
            yield t, gt[k] == IMO, pred[k] == IMO, hit

    report = build_iou_report(items(), cfg.pipeline.detection_iou)
    Path(args.out).write_text(report.to_csv())
    if args.plot:
        from .plots import plot_iou

        png = Path(args.out).with_suffix(".png")
        plot_iou(report.per_slice, report.threshold, png)
        log.info("eval plot=%s", png)
    print(report.summary())
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="imoseg",
        description="Geometric pseudo-labels for independently moving objects from flow and depth.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, epilog=_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)

    s = add("simulate", "render a synthetic scene to disk")
    s.add_argument("--spec", required=True, help="scene description (TOML)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the scene seed")
    s.add_argument("--slices", type=int, default=1, help="number of consecutive slices (default 1)")
    s.set_defaults(func=cmd_simulate)

    s = add("egomotion", "estimate the camera twist per slice and write a velocity trace")
    s.add_argument("--flow", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--t0", type=float, default=0.0, help="time of the first slice (s)")
    s.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True, help="write a PNG next to the CSV (default on)")
    s.set_defaults(func=cmd_egomotion)

    s = add("label", "write IMO pseudo-label masks and per-slice decisions")
    s.add_argument("--flow", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--config")
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-meta", required=True)
    s.add_argument("--t0", type=float, default=0.0)
    s.set_defaults(func=cmd_label)

    s = add("volume", "bin an event stream into signed event volumes")
    s.add_argument("--events", required=True, help="binary or t,x,y,p CSV events")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--t0", type=float, default=None, help="stream origin (default: first event)")
    s.set_defaults(func=cmd_volume)

    s = add("eval", "event-masked IoU of predicted masks against ground truth")
    s.add_argument("--gt-mask", required=True)
    s.add_argument("--pred-mask", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="per-slice CSV")
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True, help="write a PNG next to the CSV (default on)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, SceneSpecError, EventError, GeometryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericFailure as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
