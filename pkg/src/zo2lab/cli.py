"""`zo2` command line: a thin client of the experiment service.

Subcommands: run, suite, sim, serve.  By default requests execute against the
FastAPI app in-process (no server needed); pass --server URL to target a
running `zo2 serve` instance.  Arbitrary config keys override as --key=value.
"""

from __future__ import annotations

import argparse
import json
import sys


def _client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=600.0)
    import warnings
    with warnings.catch_warnings():
        # starlette warns about its own testclient import path; not ours
        warnings.simplefilter("ignore", Warning)
        from fastapi.testclient import TestClient
    from .service.app import create_app
    return TestClient(create_app())


def _collect_overrides(extras: list[str]) -> dict[str, str]:
    out = {}
    for item in extras:
        if not item.startswith("--") or "=" not in item:
            raise SystemExit(f"usage error: expected --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        out[key] = value
    return out


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code == 422:
        detail = resp.json().get("detail", resp.text)
        print(f"usage error: {detail}", file=sys.stderr)
        raise SystemExit(2)
    if resp.status_code != 200:
        print(f"error: {resp.status_code} {resp.text}", file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _cmd_run(args, extras) -> int:
    overrides = _collect_overrides(extras)
    payload = {"config_file": args.config, "overrides": overrides,
               "write_artifacts": not args.no_artifacts}
    with _client(args.server) as client:
        body = _post(client, "/run", payload)
    m = body["metrics"]
    print(f"engine={m['config'].get('engine')} steps={len(m['losses'])} "
          f"final_loss={m['losses'][-1]:.6f}")
    print(f"digest={m['final_digest']}")
    print(f"device_peak_bytes={m['device_peak_bytes']} "
          f"host_param_bytes={m['host_param_bytes']}")
    print(f"uploads={m['uploads']} offloads={m['offloads']} "
          f"wire_bytes={m['wire_bytes_up'] + m['wire_bytes_down']}")
    print(f"tokens/sec incl_warmup={m['tokens_per_sec_incl_warmup']:.1f} "
          f"excl_warmup={m['tokens_per_sec_excl_warmup']:.1f}")
    if body.get("output_dir"):
        print(f"artifacts: {body['output_dir']}")
    if args.json:
        print(json.dumps(body, indent=2))
    return 0


def _cmd_suite(args, extras) -> int:
    if extras:
        raise SystemExit(f"usage error: unexpected arguments {extras}")
    payload = {"name": args.name, "output_dir": args.output_dir}
    with _client(args.server) as client:
        body = _post(client, "/suite", payload)
    for check in body["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status}: {check['name']} ({check['detail']})")
    print(f"rows: {len(body['rows'])}  csv: {body['csv_path']}")
    if args.json:
        print(json.dumps(body, indent=2))
    return 0 if body["all_passed"] else 1


def _cmd_sim(args, extras) -> int:
    cost = {}
    for item in extras:
        if not item.startswith("--cost.") or "=" not in item:
            raise SystemExit(f"usage error: expected --cost.key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        cost[key.removeprefix("cost.")] = float(value)
    payload = {"preset": args.preset, "batch_size": args.batch_size,
               "codec": args.codec, "arena_slots": args.arena_slots,
               "cost": cost}
    with _client(args.server) as client:
        body = _post(client, "/sim", payload)
    print(f"{body['preset']}: {body['n_blocks']} blocks, dim {body['dim']}, "
          f"{body['n_heads']} heads, seq {body['seq_len']}")
    for row in body["rows"]:
        print(f"  {row['mode']:<8} {row['tokens_per_sec']:>12.1f} tokens/sec "
              f"(x{row['ratio_vs_mezo']:.2f} vs mezo)")
    if args.json:
        print(json.dumps(body, indent=2))
    return 0


def _cmd_serve(args, extras) -> int:
    if extras:
        raise SystemExit(f"usage error: unexpected arguments {extras}")
    import uvicorn
    uvicorn.run("zo2lab.service.app:app", host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="zo2")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training/experiment run")
    p_run.add_argument("config", nargs="?", default=None,
                       help="key=value config file (dotted keys)")
    p_run.add_argument("--server", default=None)
    p_run.add_argument("--json", action="store_true")
    p_run.add_argument("--no-artifacts", action="store_true")
    p_run.set_defaults(fn=_cmd_run)

    p_suite = sub.add_parser("suite", help="run an experiment suite")
    p_suite.add_argument("name", choices=["equivalence", "ablation", "amp",
                                          "memory-scaling", "sweep"])
    p_suite.add_argument("--output-dir", default="runs")
    p_suite.add_argument("--server", default=None)
    p_suite.add_argument("--json", action="store_true")
    p_suite.set_defaults(fn=_cmd_suite)

    p_sim = sub.add_parser("sim", help="predict throughput for a model preset")
    p_sim.add_argument("--preset", required=True)
    p_sim.add_argument("--batch-size", type=int, default=1)
    p_sim.add_argument("--codec", default="none",
                       choices=["none", "f16", "bf16", "f8"])
    p_sim.add_argument("--arena-slots", type=int, default=3)
    p_sim.add_argument("--server", default=None)
    p_sim.add_argument("--json", action="store_true")
    p_sim.set_defaults(fn=_cmd_sim)

    p_serve = sub.add_parser("serve", help="start the experiment service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=_cmd_serve)

    args, extras = parser.parse_known_args(argv)
    return args.fn(args, extras)


if __name__ == "__main__":
    sys.exit(main())
