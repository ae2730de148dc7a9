"""Command-line entry point.

Subcommands:
    generate          prefill a prompt, optionally compress, greedy-decode
    bench {passkey,recon,corr,memory}
    oracle {mgf,alloc,matmul}

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O error.
KVC_THREADS caps internal parallelism for multi-trial benches.
Configuration precedence: explicit flags > --config JSON file > defaults.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .container import ContainerError
from .controller import (
    CompressionConfig,
    DecodingCompressor,
    compress_prefill,
    write_event_log,
)
from .model import AttentionTrace, load_model
from .policies import POLICY_IDS, allocate_head_adaptive
from .stats import QueryStats, expected_log_score, mgf_oracle
from .tensorops import matmul

USAGE_ERROR = 1
VERIFICATION_FAILURE = 2
IO_ERROR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("KVC_THREADS", "1")))
    except ValueError:
        return 1


def _read_prompt(path: str) -> list[int]:
    text = Path(path).read_text()
    return [int(tok) for tok in text.split()]


GEN_DEFAULTS = {
    "max_new": 32,
    "policy": "expected_attention",
    "ratio": 0.0,
    "epsilon": 0.02,
    "rope_window": 512,
    "decode_interval": 512,
    "stats_buffer": 128,
    "max_cache": None,
    "head_adaptive": True,
    "min_keep": 1,
    "use_wo_v": False,
    "seed": 0,
}


def _resolve(args, file_cfg: dict, name: str):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in file_cfg:
        return file_cfg[name]
    return GEN_DEFAULTS[name]


def _bool_flag(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def cmd_generate(args) -> int:
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
    resolved = {name: _resolve(args, file_cfg, name) for name in GEN_DEFAULTS}

    if resolved["ratio"] > 0 and resolved["max_cache"] is not None:
        print("error: --ratio (prefill compression) conflicts with --max-cache (decoding compression)", file=sys.stderr)
        return USAGE_ERROR
    if resolved["policy"] not in POLICY_IDS:
        print(f"error: unknown policy {resolved['policy']!r}", file=sys.stderr)
        return USAGE_ERROR

    try:
        model = load_model(args.model)
        prompt = _read_prompt(args.prompt)
    except (OSError, ContainerError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR

    config = CompressionConfig(
        policy=resolved["policy"],
        ratio=resolved["ratio"],
        epsilon=resolved["epsilon"],
        rope_window=resolved["rope_window"],
        decode_interval=resolved["decode_interval"],
        stats_buffer=resolved["stats_buffer"],
        head_adaptive=resolved["head_adaptive"],
        min_keep=resolved["min_keep"],
        use_wo_v=resolved["use_wo_v"],
        seed=resolved["seed"],
    )
    c = model.config
    stats = QueryStats(c.n_layers, c.n_heads, c.head_dim, config.stats_buffer)
    cache = model.new_cache()
    need_trace = config.policy in analysis.TRACED_POLICIES and config.ratio > 0
    trace = AttentionTrace(attention=True) if need_trace else None

    events = []
    logits = model.forward(prompt, cache, stats=stats, trace=trace)
    if config.ratio > 0:
        events += compress_prefill(model, cache, stats, config, trace=trace)

    hook = DecodingCompressor(model, config, stats, resolved["max_cache"])
    out_ids = []
    for step in range(1, resolved["max_new"] + 1):
        nxt = int(np.argmax(logits[-1]))
        out_ids.append(nxt)
        logits = model.forward([nxt], cache, stats=stats)
        hook(step, cache)
    events += hook.events

    event_path = args.events or "events.jsonl"
    write_event_log(events, event_path)

    print(" ".join(str(t) for t in out_ids))
    summary = {
        "model": str(args.model),
        "prompt_tokens": len(prompt),
        "generated": out_ids,
        "config": {**resolved, "policy": config.policy},
        "cache_bytes": cache.memory_bytes(),
        "event_log": str(event_path),
        "n_events": len(events),
    }
    print(json.dumps(summary))
    return 0


def cmd_bench(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, ContainerError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR

    out = Path(args.out)
    if args.bench == "passkey":
        rows = analysis.passkey_bench(
            model,
            [int(x) for x in args.lengths.split(",")],
            [float(x) for x in args.depths.split(",")],
            args.ratio,
            args.policy,
            args.trials,
            seed=args.seed,
        )
    elif args.bench == "recon":
        prompt = _read_prompt(args.prompt)
        errs = analysis.reconstruction_error(
            model, prompt, args.policy, args.ratio, seeds=range(args.seeds)
        )
        rows = [
            {"layer": layer, "policy": args.policy, "ratio": args.ratio, "mean_error": float(e)}
            for layer, e in enumerate(errs)
        ]
    elif args.bench == "corr":
        prompt = _read_prompt(args.prompt)
        rows = analysis.attention_correlation(
            model, prompt, args.stats_prefix, args.horizon
        )
    elif args.bench == "memory":
        rows = analysis.memory_curve(
            model,
            [int(x) for x in args.lengths.split(",")],
            [float(x) for x in args.ratios.split(",")],
        )
    else:
        return USAGE_ERROR
    analysis.write_csv(out, rows)
    print(json.dumps({"bench": args.bench, "rows": len(rows), "out": str(out)}))
    return 0


def _oracle_mgf(args) -> int:
    rng = np.random.default_rng(args.seed)
    dims = [int(x) for x in args.dims.split(",")]
    failures = 0
    for trial, d in enumerate(itertools.islice(itertools.cycle(dims), args.trials)):
        a = rng.normal(size=(d, d))
        sigma = (a @ a.T / d).astype(np.float64)
        mu = rng.normal(size=d)
        k = rng.normal(size=d)
        log_score = expected_log_score(
            k.astype(np.float32), mu.astype(np.float32), sigma.astype(np.float32)
        )
        analytic = float(np.exp(log_score))
        est, se = mgf_oracle(mu, sigma, k, args.samples, seed=args.seed + trial)
        tol = max(args.rel_tol * analytic, args.se_mult * se)
        ok = abs(est - analytic) <= tol
        failures += not ok
        print(f"mgf d={d} analytic={analytic:.6g} mc={est:.6g} se={se:.2g} {'ok' if ok else 'MISMATCH'}")
    return VERIFICATION_FAILURE if failures else 0


def _brute_force_alloc(scores, positions, budget, min_keep):
    triples = []
    for h, (s, p) in enumerate(zip(scores, positions)):
        for i in range(len(s)):
            triples.append((float(s[i]), int(p[i]), h, i))
    ranked = sorted(triples, key=lambda t: (-t[0], t[1], t[2]))
    kept = set((t[2], t[3]) for t in ranked[:budget])
    floors = [min(min_keep, len(s)) for s in scores]

    def count(h):
        return sum(1 for hh, _ in kept if hh == h)

    for h in range(len(scores)):
        while count(h) < floors[h]:
            own = [t for t in ranked if t[2] == h and (t[2], t[3]) not in kept]
            promote = own[0]
            surplus = [t for t in ranked if (t[2], t[3]) in kept and count(t[2]) > floors[t[2]]]
            demote = surplus[-1]
            kept.add((promote[2], promote[3]))
            kept.discard((demote[2], demote[3]))
    return [sorted(i for hh, i in kept if hh == h) for h in range(len(scores))]


def _oracle_alloc(args) -> int:
    rng = np.random.default_rng(args.seed)
    values = np.array([0.0, 1.0, 2.0], dtype=np.float32)
    failures = 0
    checked = 0
    for _ in range(args.instances):
        n_heads = int(rng.integers(1, 5))
        lens = [int(rng.integers(1, 9)) for _ in range(n_heads)]
        scores = [values[rng.integers(0, 3, size=n)] for n in lens]
        positions = [np.arange(n, dtype=np.int64) for n in lens]
        total = sum(lens)
        for min_keep in (0, 1):
            lo = sum(min(min_keep, n) for n in lens)
            for budget in range(lo, total + 1):
                got = allocate_head_adaptive(scores, positions, budget, min_keep)
                want = _brute_force_alloc(scores, positions, budget, min_keep)
                checked += 1
                if [list(g) for g in got] != [list(w) for w in want]:
                    failures += 1
                    print(f"alloc MISMATCH heads={lens} budget={budget} min_keep={min_keep}")
    print(f"alloc checked={checked} failures={failures}")
    return VERIFICATION_FAILURE if failures else 0


def _oracle_matmul(args) -> int:
    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal((args.size, args.size)).astype(np.float32)
    b = rng.standard_normal((args.size, args.size)).astype(np.float32)
    got = matmul(a, b)
    ref = np.zeros((args.size, args.size), dtype=np.float64)
    for i in range(args.size):
        for j in range(args.size):
            acc = 0.0
            for kk in range(args.size):
                acc += float(a[i, kk]) * float(b[kk, j])
            ref[i, j] = acc
    err = float(np.abs(got - ref).max())
    ok = err <= args.tolerance
    print(f"matmul n={args.size} max_abs_diff={err:.3g} {'ok' if ok else 'MISMATCH'}")
    return 0 if ok else VERIFICATION_FAILURE


def build_parser() -> _Parser:
    parser = _Parser(prog="kvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="greedy decoding with optional compression")
    g.add_argument("--model", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--config", help="JSON config file; flags override it")
    g.add_argument("--max-new", dest="max_new", type=int)
    g.add_argument("--policy", choices=POLICY_IDS)
    g.add_argument("--ratio", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--rope-window", dest="rope_window", type=int)
    g.add_argument("--decode-interval", dest="decode_interval", type=int)
    g.add_argument("--stats-buffer", dest="stats_buffer", type=int)
    g.add_argument("--max-cache", dest="max_cache", type=int)
    g.add_argument("--head-adaptive", dest="head_adaptive", type=_bool_flag)
    g.add_argument("--min-keep", dest="min_keep", type=int)
    g.add_argument("--use-wo-v", dest="use_wo_v", action="store_const", const=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--events", help="event log path (JSON lines)")
    g.set_defaults(fn=cmd_generate)

    b = sub.add_parser("bench", help="analysis benches emitting CSV")
    bsub = b.add_subparsers(dest="bench", required=True)
    for name in ("passkey", "recon", "corr", "memory"):
        p = bsub.add_parser(name)
        p.add_argument("--model", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        if name == "passkey":
            p.add_argument("--lengths", default="256,512")
            p.add_argument("--depths", default="0.1,0.5,0.9")
            p.add_argument("--ratio", type=float, default=0.5)
            p.add_argument("--policy", default="expected_attention", choices=POLICY_IDS)
            p.add_argument("--trials", type=int, default=5)
        elif name == "recon":
            p.add_argument("--prompt", required=True)
            p.add_argument("--policy", default="expected_attention", choices=POLICY_IDS)
            p.add_argument("--ratio", type=float, default=0.5)
            p.add_argument("--seeds", type=int, default=1)
        elif name == "corr":
            p.add_argument("--prompt", required=True)
            p.add_argument("--stats-prefix", dest="stats_prefix", type=int, default=64)
            p.add_argument("--horizon", type=int, default=16)
        elif name == "memory":
            p.add_argument("--lengths", default="128,256,512")
            p.add_argument("--ratios", default="0.0,0.5,0.9")
        p.set_defaults(fn=cmd_bench)

    o = sub.add_parser("oracle", help="standalone brute-force verification")
    osub = o.add_subparsers(dest="oracle", required=True)

    m = osub.add_parser("mgf")
    m.add_argument("--dims", default="1,2,4,8")
    m.add_argument("--trials", type=int, default=20)
    m.add_argument("--samples", type=int, default=1_000_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--rel-tol", dest="rel_tol", type=float, default=0.02)
    m.add_argument("--se-mult", dest="se_mult", type=float, default=3.0)
    m.set_defaults(fn=_oracle_mgf)

    a = osub.add_parser("alloc")
    a.add_argument("--instances", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=_oracle_alloc)

    mm = osub.add_parser("matmul")
    mm.add_argument("--size", type=int, default=32)
    mm.add_argument("--seed", type=int, default=0)
    mm.add_argument("--tolerance", type=float, default=1e-5)
    mm.set_defaults(fn=_oracle_matmul)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
