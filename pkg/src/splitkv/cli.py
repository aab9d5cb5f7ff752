"""Command line entry point: ``splitkv <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bench, pipeline
from .model import ModelConfig, init_model


def parse_token_ids(text: str) -> list[int]:
    if os.path.exists(text):
        text = Path(text).read_text()
        stripped = text.strip()
        if stripped.startswith("["):
            return [int(t) for t in json.loads(stripped)]
    return [int(t) for t in text.replace(",", " ").split()]


def load_prompts(path) -> dict[int, list[int]]:
    with open(path) as f:
        raw = json.load(f)
    return {int(k): [int(t) for t in v] for k, v in raw.items()}


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_serve_cloud(args) -> int:
    from .kv_sync import CloudServer
    from .kv_sync.transport import parse_endpoint

    model = init_model(ModelConfig.load(args.config))
    host, port = parse_endpoint(args.listen)
    delay = None
    if args.link_delay:
        delay = lambda layer, d=args.link_delay: d  # noqa: E731
    server = CloudServer(model, load_prompts(args.prompts), host, port, link_delay=delay)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_run_edge(args) -> int:
    from .kv_sync import CloudError, EdgeClient, SessionAborted, WireCapture, privacy_audit
    from .kv_sync.transport import parse_endpoint

    model = init_model(ModelConfig.load(args.config))
    tokens = parse_token_ids(args.edge_prompt)
    capture = WireCapture() if args.capture else None
    client = EdgeClient(
        model, parse_endpoint(args.cloud), prompt_id=args.prompt_id, session_id=args.session_id,
        pipelined=not args.sequential, capture=capture,
    )
    try:
        sess = client.run(tokens, args.steps)
    except (CloudError, SessionAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if capture is not None:
            capture.save(args.capture)
    print(" ".join(map(str, sess.tokens)))
    if capture is not None:
        print(f"capture: {args.capture} ({privacy_audit(capture, tokens).summary()})", file=sys.stderr)
    return 0


def cmd_audit(args) -> int:
    from .kv_sync import WireCapture, privacy_audit

    report = privacy_audit(WireCapture.load(args.capture), parse_token_ids(args.edge_prompt))
    print(report.summary())
    for v in report.violations:
        print(f"  {v.kind} in {v.direction} at byte {v.offset}: {v.detail}")
    return 0 if report.ok else 1


def cmd_simulate(args) -> int:
    prof = pipeline.TimingProfile.load(args.profile)
    trace = pipeline.simulate(prof, cloud_overlap=args.cloud_overlap)
    text = trace.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"total {trace.total!r}  closed form {pipeline.closed_form_total(prof)!r}", file=sys.stderr)
    return 0


def cmd_classify(args) -> int:
    prof = pipeline.TimingProfile.load(args.profile)
    regime = pipeline.classify_regime(prof, args.eps)
    print(regime.value)
    if regime is not pipeline.Regime.UNCLASSIFIED:
        print(f"objective {pipeline.objective_value(regime, prof)!r}")
    return 0


def cmd_validate(args) -> int:
    prof = pipeline.TimingProfile.load(args.profile)
    report = pipeline.validate_assumptions(prof, args.f_cloud, args.f_edge, args.eps)
    print("\n".join(report.lines()))
    return 0 if report.all_pass else 1


def _cost_model(path) -> bench.CostModel:
    return bench.CostModel.load(path) if path else bench.CostModel()


def cmd_bench_batch(args) -> int:
    cm = _cost_model(args.cost_model)
    if args.requests % args.groups:
        print("error: --groups must divide --requests", file=sys.stderr)
        return 2
    out = Path(args.out)
    sweep = args.cloud_len_sweep
    print("cloud_len,tokens_per_s,req_per_s")
    for c in sweep:
        w = bench.Workload(args.requests, args.requests // args.groups, c, args.edge_len,
                           seed=args.seed, decode_steps=args.decode_steps)
        result = bench.run_batch(w, args.mode, cm)
        path = out if len(sweep) == 1 else out.with_name(f"{out.stem}_c{c}{out.suffix}")
        bench.emit_csv(result, path)
        print(f"{c},{result.throughput_tokens_per_s!r},{result.throughput_req_per_s!r}")
    return 0


def cmd_bench_interactive(args) -> int:
    cm = _cost_model(args.cost_model)
    w = bench.Workload(args.requests, args.group_size, args.cloud_len, args.edge_len, "poisson",
                       args.rate, args.seed, args.decode_steps)
    result = bench.run_interactive(w, args.mode, cm)
    bench.emit_csv(result, args.out)
    lat = result.latency_summary()
    print(f"req/s {result.throughput_req_per_s!r}  s/token mean {lat['mean']!r} p50 {lat['p50']!r} p99 {lat['p99']!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitkv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve-cloud", help="run the cloud KV server")
    s.add_argument("--listen", required=True, help="host:port")
    s.add_argument("--config", required=True, help="model.json")
    s.add_argument("--prompts", required=True, help="prompts.json: id -> token ids")
    s.add_argument("--link-delay", type=float, default=0.0, help="extra seconds per KV frame")
    s.set_defaults(func=cmd_serve_cloud)

    s = sub.add_parser("run-edge", help="run one edge session and print generated tokens")
    s.add_argument("--cloud", required=True, help="host:port")
    s.add_argument("--config", required=True)
    s.add_argument("--edge-prompt", required=True, help="token ids (comma/space separated) or a file")
    s.add_argument("--prompt-id", type=int, default=0)
    s.add_argument("--session-id", type=int, default=1)
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--capture", help="write raw wire bytes here")
    s.add_argument("--sequential", action="store_true", help="no receiver thread")
    s.set_defaults(func=cmd_run_edge)

    s = sub.add_parser("audit", help="scan a wire capture for edge prompt leaks")
    s.add_argument("--capture", required=True)
    s.add_argument("--edge-prompt", required=True)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("simulate", help="event-driven pipeline trace")
    s.add_argument("--profile", required=True)
    s.add_argument("--out")
    s.add_argument("--cloud-overlap", action="store_true", help="cloud computes layer l+1 while layer l is sent")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("classify", help="print the regime and its objective")
    s.add_argument("--profile", required=True)
    s.add_argument("--eps", type=float, default=pipeline.DEFAULT_EPS)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("validate", help="check the timing assumptions")
    s.add_argument("--profile", required=True)
    s.add_argument("--f-cloud", type=float, required=True)
    s.add_argument("--f-edge", type=float, required=True)
    s.add_argument("--eps", type=float, default=pipeline.DEFAULT_EPS)
    s.set_defaults(func=cmd_validate)

    b = sub.add_parser("bench", help="simulated benchmarks").add_subparsers(dest="bench_command", required=True)
    s = b.add_parser("batch")
    s.add_argument("--cloud-len-sweep", type=_int_list, default=list(bench.DEFAULT_SWEEP))
    s.add_argument("--edge-len", type=int, default=512)
    s.add_argument("--requests", type=int, default=1000)
    s.add_argument("--groups", type=int, default=100)
    s.add_argument("--mode", choices=bench.MODES, default="edgeprompt")
    s.add_argument("--cost-model")
    s.add_argument("--decode-steps", type=int, default=bench.DEFAULT_DECODE_STEPS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench_batch)

    s = b.add_parser("interactive")
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--requests", type=int, default=1000)
    s.add_argument("--cloud-len", type=int, default=1024)
    s.add_argument("--edge-len", type=int, default=512)
    s.add_argument("--group-size", type=int, default=10)
    s.add_argument("--mode", choices=bench.MODES, default="edgeprompt")
    s.add_argument("--cost-model")
    s.add_argument("--decode-steps", type=int, default=bench.DEFAULT_DECODE_STEPS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench_interactive)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
