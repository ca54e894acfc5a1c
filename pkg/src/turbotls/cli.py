"""Command-line entry points: ``bench``, ``serve`` and ``connect``."""

import argparse
import asyncio
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .client import ClientConfig
from .discovery import CapabilityCache, DiscoveryError, decode_https_rdata
from .handshake import get_suite, mock_engine
from .netsim import ConfigInvalid, Protocol, Scenario, build_scenario, run_scenario, to_csv, to_table
from .server import ServerConfig, ServerState
from .transport import TurboServer, connect

logger = logging.getLogger("turbotls")

DEFAULT_PORT = 4443


def _host_port(value: str) -> Tuple[str, Optional[int]]:
    host, sep, port = value.rpartition(":")
    if not sep:
        return value, None
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {value!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turbotls", description="TurboTLS toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run simulator scenarios, TurboTLS vs vanilla TLS")
    bench.add_argument("--scenario", type=Path, help="key=value scenario file")
    bench.add_argument("--rtt-ms", type=float)
    bench.add_argument("--loss", type=float)
    bench.add_argument("--jitter-ms", type=float)
    bench.add_argument("--suite", choices=["ec", "pq"])
    bench.add_argument("--sessions", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--grace-ms", type=float)
    bench.add_argument("--grace-rtt-fraction", type=float)
    bench.add_argument("--budget", type=int)
    bench.add_argument("--compute-ms", type=float)
    bench.add_argument(
        "--protocol", choices=["both", "turbo", "vanilla", "auto"], default="both"
    )
    bench.add_argument("--out", choices=["csv", "table"], default="csv")

    serve = sub.add_parser("serve", help="serve the mock handshake over UDP+TCP")
    serve.add_argument("--listen", type=_host_port, default=("127.0.0.1", None),
                       help="host[:port]; port sets both transports")
    serve.add_argument("--udp-port", type=int)
    serve.add_argument("--tcp-port", type=int)
    serve.add_argument("--suite", choices=["ec", "pq"], default="pq")
    serve.add_argument("--duration", type=float, help="exit after this many seconds")

    conn = sub.add_parser("connect", help="connect to a serve instance and echo a message")
    conn.add_argument("--connect", dest="target", type=_host_port, default=("127.0.0.1", None),
                      help="host[:port]")
    conn.add_argument("--udp-port", type=int)
    conn.add_argument("--tcp-port", type=int)
    conn.add_argument("--turbo", choices=["on", "off", "auto"], default="on")
    conn.add_argument("--suite", choices=["ec", "pq"], default="pq")
    conn.add_argument("--grace-ms", type=float, default=2.0)
    conn.add_argument("--message", default="hello turbotls")
    conn.add_argument("--timeout", type=float, default=5.0)
    conn.add_argument("--cache-file", type=Path, help="capability cache for --turbo auto")
    conn.add_argument("--https-rr", help="HTTPS RR RDATA (hex) for the target, for --turbo auto")
    return parser


def _bench(args: argparse.Namespace) -> int:
    settings = {}
    if args.scenario is not None:
        base = Scenario.from_config(args.scenario.read_text())
        for line in base.to_config().splitlines():
            key, _, value = line.partition("=")
            settings[key] = value
    overrides = {
        "rtt_ms": args.rtt_ms,
        "loss": args.loss,
        "jitter_ms": args.jitter_ms,
        "suite": args.suite,
        "sessions": args.sessions,
        "seed": args.seed,
        "grace_ms": args.grace_ms,
        "grace_rtt_fraction": args.grace_rtt_fraction,
        "budget": args.budget,
        "compute_ms": args.compute_ms,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    scenario = build_scenario(**settings)
    if args.protocol == "both":
        protocols = [Protocol.VANILLA, Protocol.TURBO]
    else:
        protocols = [Protocol(args.protocol)]
    runs = [run_scenario(replace(scenario, protocol=p)) for p in protocols]
    sys.stdout.write(to_csv(runs) if args.out == "csv" else to_table(runs))
    return 0


def _ports(default: Optional[int], udp: Optional[int], tcp: Optional[int]) -> Tuple[int, int]:
    base = default if default is not None else DEFAULT_PORT
    return (udp if udp is not None else base), (tcp if tcp is not None else base)


async def _serve(args: argparse.Namespace) -> int:
    host, port = args.listen
    udp_port, tcp_port = _ports(port, args.udp_port, args.tcp_port)
    suite = get_suite(args.suite)
    seeds = iter(range(1 << 62))
    state = ServerState(lambda: mock_engine(suite, next(seeds)), ServerConfig())
    server = TurboServer(state)
    await server.start(host, udp_port, tcp_port)
    logger.info("listening udp=%s tcp=%s", server.udp_address, server.tcp_address)
    print(f"listening udp={server.udp_address[1]} tcp={server.tcp_address[1]}", flush=True)
    try:
        if args.duration is not None:
            await asyncio.sleep(args.duration)
        else:
            await asyncio.Event().wait()
    finally:
        await server.close()
        logger.info("amplification %s", state.amplification_report())
    return 0


def _decide_turbo(args: argparse.Namespace, host: str) -> bool:
    if args.turbo != "auto":
        return args.turbo == "on"
    now = time.time()
    if args.cache_file is not None and args.cache_file.exists():
        cache = CapabilityCache.load(args.cache_file)
    else:
        cache = CapabilityCache()
    if args.https_rr:
        cache.learn(host, decode_https_rdata(bytes.fromhex(args.https_rr)), now, 3600.0)
        if args.cache_file is not None:
            cache.save(args.cache_file)
    return bool(cache.lookup(host, now))


async def _connect(args: argparse.Namespace) -> int:
    host, port = args.target
    udp_port, tcp_port = _ports(port, args.udp_port, args.tcp_port)
    message = args.message.encode()
    config = ClientConfig(
        grace_delay=args.grace_ms / 1000,
        turbo=_decide_turbo(args, host),
        app_data=message,
    )
    engine = mock_engine(get_suite(args.suite), seed=int.from_bytes(os.urandom(8), "big"))
    result = await connect(config, engine, host, udp_port, tcp_port, timeout=args.timeout)
    ok = result.echo == message
    print(
        f"path={result.path} ttfab_ms={result.time_to_first_app_byte * 1000:.3f} "
        f"echo={'ok' if ok else 'mismatch'}",
        flush=True,
    )
    return 0 if ok else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    quiet = logging.WARNING if args.command == "bench" else logging.INFO
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else quiet,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "bench":
            return _bench(args)
        if args.command == "serve":
            return asyncio.run(_serve(args))
        return asyncio.run(_connect(args))
    except (ConfigInvalid, DiscoveryError, ValueError) as exc:
        print(f"turbotls: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ConnectionError, asyncio.TimeoutError) as exc:
        print(f"turbotls: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"turbotls: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
