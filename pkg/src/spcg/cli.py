"""Command-line entry point: ``spcg {encode,decode,train,eval,sweep}``.

Machine-readable results go to stdout (JSON, or CSV for sweep); diagnostics
go to stderr.  Exit codes: 0 ok, 2 usage, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import codec
from .metrics import quality_report
from .modelfile import ModelFileError, load_models, save_model
from .pointcloud import PLYError, read_ply, write_ply
from .training import (
    TRAIN_ARCHS,
    Schedule,
    TrainingDiverged,
    load_dataset,
    make_networks,
    read_manifest,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

MODES = {"lossless": codec.Mode.LOSSLESS, "lossy-dense": codec.Mode.LOSSY_DENSE,
         "lossy-sparse": codec.Mode.LOSSY_SPARSE}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    raw = os.environ.get("SPCG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"SPCG_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _models(paths: list[str]):
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"model not found: {p}")
    try:
        return load_models(paths)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except ModelFileError as e:
        raise UsageError(f"bad model file: {e}") from None


def _config(args, N: int) -> codec.CodecConfig:
    mode = MODES[args.mode]
    if mode != codec.Mode.LOSSLESS:
        if args.m is None:
            raise UsageError("--m is required in lossy modes")
        if not 0 < args.m < N:
            raise UsageError(f"--m must satisfy 0 < m < N (got m={args.m}, N={N})")
    return codec.CodecConfig(mode, N, args.m or 0, args.lossless_arch)


def _read_input(path: str, N: int | None):
    try:
        return read_ply(_existing(path, "input"), N)
    except (PLYError, ValueError) as e:
        raise UsageError(f"cannot read {path}: {e}") from None


def _check_archs(cfg: codec.CodecConfig, models: dict):
    missing = [a for a in cfg.required_archs() if a not in models]
    if missing:
        raise UsageError(f"model not found for arch(s): {', '.join(missing)}")


def cmd_encode(args) -> int:
    models = _models(args.model)
    cloud = _read_input(args.input, args.precision)
    cfg = _config(args, cloud.N)
    _check_archs(cfg, models)
    bs = codec.encode(cloud, cfg, models)
    data = bs.to_bytes()
    Path(args.output).write_bytes(data)
    rep = codec.rate_report(bs)
    out = {"points": len(cloud), "original_count": cloud.original_count, "bytes": len(data), **rep.to_dict()}
    print(json.dumps(out))
    return EXIT_OK


def cmd_decode(args) -> int:
    models = _models(args.model)
    data = _existing(args.input, "input").read_bytes()
    cloud = codec.decode(data, models)
    write_ply(args.output, cloud, binary=args.binary)
    print(json.dumps({"points": len(cloud), "N": cloud.N}))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.arch not in TRAIN_ARCHS:
        raise UsageError(f"unknown arch {args.arch!r}; expected one of {', '.join(TRAIN_ARCHS)}")
    if args.epochs < 0:
        raise UsageError("--epochs must be non-negative")
    try:
        records = read_manifest(_existing(args.dataset, "dataset manifest"))
        dataset = load_dataset(records)
    except ValueError as e:
        raise UsageError(str(e)) from None
    config = {"k": args.k if args.k else (5 if args.arch == "sopa_position" else 3), "C": args.channels}
    if args.arch == "slne":
        config["latent"] = args.latent
    if args.lr <= 0:
        raise UsageError("--lr must be positive")
    sch = Schedule(epochs=args.epochs, batch=args.batch, seed=args.seed, lr_start=args.lr, lr_end=args.lr / 40)
    nets = None
    if args.init:
        if args.arch != "slne":
            raise UsageError("--init only applies to --arch slne")
        base = _models([args.init]).get("one_stage_sopa")
        if base is None:
            raise UsageError("--init must be a one_stage_sopa model")
        config = {k: v for k, v in config.items() if k not in ("k", "C")}
        nets = make_networks("slne", args.seed, base=base, units=base.config["units"], **config)
    log = args.log or str(Path(args.out).with_suffix(".log.csv"))

    def progress(row):
        print(f"epoch {row['epoch']}: loss {row['total']:.5f} lr {row['lr']:.2e}", file=sys.stderr)

    nets = train(args.arch, dataset, sch, nets=nets, log_path=log, config=config, progress=progress)
    out = Path(args.out)
    written = {}
    if len(nets) == 1:
        (net,) = nets.values()
        target = out / f"{net.arch_id}.spnw" if out.is_dir() else out
        written[net.arch_id] = (str(target), save_model(net, target))
    else:
        out.mkdir(parents=True, exist_ok=True)
        for arch_id, net in nets.items():
            target = out / f"{arch_id}.spnw"
            written[arch_id] = (str(target), save_model(net, target))
    print(json.dumps({"models": {a: {"path": p, "checksum": f"{c:016x}"} for a, (p, c) in written.items()},
                      "log": log}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = _read_input(args.reference, args.precision)
    test = _read_input(args.test, ref.N)
    bits = None
    if args.bitstream:
        bits = 8 * _existing(args.bitstream, "bitstream").stat().st_size
    rep = quality_report(ref, test, bits)
    print(rep.table() if args.table else rep.to_json())
    return EXIT_OK


def _sweep_point(payload):
    cloud, cfg, models = payload
    bs = codec.encode(cloud, cfg, models)
    data = bs.to_bytes()
    rec = codec.decode(data, models)
    rep = quality_report(cloud, rec, 8 * len(data))
    return rep


def cmd_sweep(args) -> int:
    try:
        ms = [int(v) for v in args.m_list.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"bad --m-list {args.m_list!r}") from None
    if not ms:
        raise UsageError("--m-list is empty")
    if args.mode == "lossless":
        raise UsageError("sweep needs a lossy mode")
    models = _models([args.models])
    cloud = _read_input(args.input, args.precision)
    cfgs = []
    for m in ms:
        args.m = m
        cfg = _config(args, cloud.N)
        _check_archs(cfg, models)
        cfgs.append(cfg)
    jobs = [(cloud, cfg, models) for cfg in cfgs]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            reports = list(ex.map(_sweep_point, jobs))
    else:
        reports = [_sweep_point(j) for j in jobs]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["m", "bpp", "d1_psnr", "d2_psnr", "points_out"])
    for m, r in zip(ms, reports):
        wr.writerow([m, f"{r.bpp:.6f}", _fmt(r.d1_psnr), _fmt(r.d2_psnr), r.points_test])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return ""
    return "inf" if math.isinf(v) else f"{v:.4f}"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spcg", description="Learned multiscale point cloud geometry codec.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def codec_flags(sp, output=True):
        sp.add_argument("--input", required=True)
        sp.add_argument("--model", action="append", required=True,
                        help="model file or directory of *.spnw files (repeatable)")
        if output:
            sp.add_argument("--output", required=True)

    e = sub.add_parser("encode", help="PLY -> bitstream")
    codec_flags(e)
    e.add_argument("--mode", choices=list(MODES), default="lossless")
    e.add_argument("--precision", type=int)
    e.add_argument("--m", type=int)
    e.add_argument("--lossless-arch", choices=codec.LOSSLESS_ARCHS, default="multistage_sopa_8")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="bitstream -> PLY")
    codec_flags(d)
    d.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train one architecture on a synthetic manifest")
    t.add_argument("--arch", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--channels", type=int, default=8)
    t.add_argument("--k", type=int)
    t.add_argument("--latent", type=int, default=4)
    t.add_argument("--lr", type=float, default=8e-4, help="initial learning rate (cosine decay to lr/40)")
    t.add_argument("--init", help="one_stage_sopa model to warm-start an slne decoder from")
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="D1/D2 PSNR between two clouds")
    v.add_argument("--reference", required=True)
    v.add_argument("--test", required=True)
    v.add_argument("--precision", type=int)
    v.add_argument("--bitstream")
    v.add_argument("--table", action="store_true")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="rate-distortion sweep over m; CSV on stdout")
    s.add_argument("--input", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--mode", choices=["lossy-dense", "lossy-sparse"], required=True)
    s.add_argument("--m-list", required=True)
    s.add_argument("--precision", type=int)
    s.add_argument("--lossless-arch", choices=codec.LOSSLESS_ARCHS, default="multistage_sopa_8")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"spcg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"spcg: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (codec.BitstreamError, ValueError, KeyError, RuntimeError, OSError) as e:
        print(f"spcg: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
