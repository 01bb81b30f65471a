#!/usr/bin/env python3
"""
Command-line entry point for the secure storage stack.

Subcommands run benchmarks, create and inspect simulated devices, serve the
key broker or a remote engine over TCP, and run crash recovery.
"""

import argparse
import threading
from pathlib import Path

from src.bench import run, sweep
from src.blockdev import SimDevice, hexdump_sector
from src.config import DEFAULT_HOST, RESULTS_DIR, load_config
from src.crypto import CipherSuite
from src.exceptions import SecureStorageError
from src.export import export_results_csv, results_frame
from src.kbs import KbsFrameHandler, KeyBrokerService
from src.layout import DeviceGeometry, data_to_physical
from src.logger import set_level, setup_logger
from src.nvstore import NvStore
from src.remote_engine import RemoteEngine, RemoteFrameHandler
from src.transport import FrameServer
from src.workload import PATTERNS, MODES, WorkloadSpec, parse_size

logger = setup_logger(__name__)


def _on_off(text: str) -> bool:
    if text.lower() not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text.lower() == "on"


def _add_workload_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pattern", choices=PATTERNS, default="rand-read")
    parser.add_argument("--bs", type=parse_size, default=4096, help="Block size, e.g. 4k or 1m (default: 4k)")
    parser.add_argument("--qd", type=int, default=1, help="Queue depth per worker (default: 1)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--ops", type=int, default=1000, help="Operations to issue (default: 1000)")
    parser.add_argument("--duration", type=float, default=None, help="Stop issuing after this many seconds")
    parser.add_argument("--mode", choices=MODES, default="freshness")
    parser.add_argument("--ec", type=_on_off, default=True, help="Eventual consistency on|off (default: on)")
    parser.add_argument("--pollution", type=float, default=0.0, help="Fraction of data sets with stale tags")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--working-sectors", type=int, default=None)
    parser.add_argument("--read-fraction", type=float, default=0.5, help="Read share of the mixed pattern")
    parser.add_argument("--out", type=str, default=None, help="CSV file for the results")


def _spec_from(args: argparse.Namespace) -> WorkloadSpec:
    return WorkloadSpec(
        pattern=args.pattern,
        block_bytes=args.bs,
        queue_depth=args.qd,
        workers=args.workers,
        ops=args.ops,
        duration_s=args.duration,
        mode=args.mode,
        ec=args.ec,
        pollution=args.pollution,
        seed=args.seed,
        working_sectors=args.working_sectors,
        read_fraction=args.read_fraction,
    )


def _geometry(config, args: argparse.Namespace) -> DeviceGeometry:
    dev = config.device
    return DeviceGeometry(
        getattr(args, "sectors", None) or dev.total_sectors,
        dev.sector_bytes,
        getattr(args, "metadata", None) or dev.metadata_bytes,
        dev.data_set_size,
    )


def _suite(config) -> CipherSuite:
    return CipherSuite(config.suite.aead, config.suite.hash)


def _nv_path(args: argparse.Namespace) -> Path:
    return Path(args.nv) if args.nv else Path(args.device).with_suffix(".nv")


def cmd_bench_run(config, args: argparse.Namespace) -> int:
    row = run(_spec_from(args), config)
    df = results_frame([row])
    out = Path(args.out) if args.out else RESULTS_DIR / "bench.csv"
    export_results_csv(df, out, append=True)
    print(f"\n{'='*60}")
    print(f"{row['pattern']} {row['block_bytes']}B qd={row['queue_depth']} mode={row['mode']} ec={row['ec']}")
    print(f"{'='*60}")
    print(f"IOPS:            {row['iops']:.0f}")
    print(f"Throughput:      {row['throughput_bps'] / 1e6:.2f} MB/s")
    print(f"Latency p50/p99: {row['lat_p50_us']:.0f} / {row['lat_p99_us']:.0f} us")
    print(f"Full path rate:  {row['full_path_rate']:.2%}")
    print(f"Cache hit rate:  {row['cache_hit_rate']:.2%}")
    print(f"Results:         {out}")
    return 0


def cmd_bench_sweep(config, args: argparse.Namespace) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    df = sweep(args.axis, values, _spec_from(args), config)
    out = Path(args.out) if args.out else RESULTS_DIR / f"sweep_{args.axis}.csv"
    export_results_csv(df, out)
    print(df[["label", "iops", "lat_p99_us", "full_path_rate", "hasher_backlog"]].to_string(index=False))
    print(f"\nResults: {out}")
    return 0


def cmd_mkdev(config, args: argparse.Namespace) -> int:
    geometry = _geometry(config, args)
    device = SimDevice.create(Path(args.device), geometry)
    engine = RemoteEngine.format(device, _nv_path(args), config.remote, _suite(config))
    engine.close()
    device.close()
    print(f"Created {args.device}: {geometry.total_sectors} sectors, {geometry.data_set_count} data sets, "
          f"{geometry.data_sector_count} data sectors, {geometry.metadata_bytes}B metadata")
    print(f"NV store: {_nv_path(args)}")
    return 0


def cmd_dumpdev(config, args: argparse.Namespace) -> int:
    geometry = _geometry(config, args)
    device = SimDevice(Path(args.device), geometry)
    try:
        start = args.sector if args.physical else data_to_physical(args.sector, geometry)
        for offset, record in enumerate(device.read_sectors(start, args.count)):
            print(hexdump_sector(record, start + offset))
    finally:
        device.close()
    return 0


def _serve(server: FrameServer, what: str) -> int:
    server.start()
    print(f"{what} listening on {server.server_address[0]}:{server.port} (Ctrl-C to stop)")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_kbs_serve(config, args: argparse.Namespace) -> int:
    kbs = KeyBrokerService(config.kbs, _suite(config))
    for tenant in args.tenant or []:
        kbs.register_tenant(tenant)
    for device in args.register or []:
        try:
            kbs.register_device(bytes.fromhex(device))
        except SecureStorageError as e:
            logger.warning(f"{e}")
    handler = KbsFrameHandler(kbs, config.attestation, config.local.window_size)
    return _serve(FrameServer(handler, args.host, args.port or config.kbs.port), "KBS")


def _open_engine(config, args: argparse.Namespace) -> RemoteEngine:
    device = SimDevice(Path(args.device), _geometry(config, args))
    return RemoteEngine.open(device, NvStore.open(_nv_path(args)), config.remote, _suite(config))


def cmd_remote_serve(config, args: argparse.Namespace) -> int:
    engine = _open_engine(config, args)
    handler = RemoteFrameHandler(engine, config.attestation, config.remote.window_size)
    try:
        return _serve(FrameServer(handler, args.host, args.port or config.remote.port), "Remote engine")
    finally:
        engine.close()


def cmd_recover(config, args: argparse.Namespace) -> int:
    engine = _open_engine(config, args)
    try:
        print(f"Recovered root: {engine.tree.root.hex()}")
    finally:
        engine.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Secure disaggregated storage stack - benchmarks, devices and services"
    )
    parser.add_argument("--config", type=str, default=None, help="TOML configuration file")
    parser.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="Run benchmarks").add_subparsers(dest="bench_command", required=True)
    bench_run = bench.add_parser("run", help="Run one workload")
    _add_workload_args(bench_run)
    bench_run.set_defaults(func=cmd_bench_run)
    bench_sweep = bench.add_parser("sweep", help="Run one workload per value of an axis")
    bench_sweep.add_argument("--axis", required=True, help="pollution, qd, bs, mode, ec, pattern, workers or seed")
    bench_sweep.add_argument("--values", required=True, help="Comma-separated values, e.g. 0,0.25,0.5")
    _add_workload_args(bench_sweep)
    bench_sweep.set_defaults(func=cmd_bench_sweep)

    for name, func, text in (
        ("mkdev", cmd_mkdev, "Create a zero-filled device and its NV store"),
        ("dumpdev", cmd_dumpdev, "Hex-dump sectors of a device"),
        ("recover", cmd_recover, "Run crash recovery on a device"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("device", help="Device backing file")
        p.add_argument("--nv", default=None, help="NV store file (default: <device>.nv)")
        p.add_argument("--sectors", type=int, default=None, help="Total physical sectors")
        p.add_argument("--metadata", type=int, choices=(16, 64), default=None, help="Metadata bytes per sector")
        p.set_defaults(func=func)
        if name == "dumpdev":
            p.add_argument("--sector", type=int, default=0, help="Data sector to dump")
            p.add_argument("--count", type=int, default=1)
            p.add_argument("--physical", action="store_true", help="Treat --sector as a physical sector")

    kbs = sub.add_parser("kbs", help="Key broker service").add_subparsers(dest="kbs_command", required=True)
    kbs_serve = kbs.add_parser("serve", help="Serve the KBS over TCP")
    kbs_serve.add_argument("--host", default=DEFAULT_HOST)
    kbs_serve.add_argument("--port", type=int, default=None)
    kbs_serve.add_argument("--tenant", action="append", help="Register a tenant at start-up")
    kbs_serve.add_argument("--register", action="append", help="Register a device id (hex) at start-up")
    kbs_serve.set_defaults(func=cmd_kbs_serve)

    remote = sub.add_parser("remote", help="Remote engine").add_subparsers(dest="remote_command", required=True)
    remote_serve = remote.add_parser("serve", help="Serve a device over TCP")
    remote_serve.add_argument("device", help="Device backing file")
    remote_serve.add_argument("--nv", default=None)
    remote_serve.add_argument("--sectors", type=int, default=None)
    remote_serve.add_argument("--metadata", type=int, choices=(16, 64), default=None)
    remote_serve.add_argument("--host", default=DEFAULT_HOST)
    remote_serve.add_argument("--port", type=int, default=None)
    remote_serve.set_defaults(func=cmd_remote_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_level(args.log_level)
    try:
        config = load_config(Path(args.config) if args.config else None)
        return args.func(config, args)
    except SecureStorageError as e:
        print(f"\n✗ {type(e).__name__}: {e}")
        logger.exception("Command failed")
        return 1


if __name__ == "__main__":
    exit(main())
