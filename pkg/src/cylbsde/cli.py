"""Command line entry point: ``cylbsde run|validate|families``.

Exit status: 0 when every invariant passes, 1 on the first failing invariant,
2 for configuration errors and 3 when the tree would exceed the node cap.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import families
from .config import ConfigError, load
from .harness import run_config, write_bundle
from .tree import NodeCapExceeded

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_CAP = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cylbsde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the study described by a config")
    run.add_argument("config")
    run.add_argument("--out", default=None, help="output directory (default: results/<name>)")
    run.add_argument("--cap", type=int, default=None, help="node-count cap")
    run.add_argument("--threads", type=int, default=None, help="worker threads")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.add_argument("--cap", type=int, default=None)
    fam = sub.add_parser("families", help="list built-in families")
    fam.add_argument("--json", action="store_true", help="machine-readable listing")
    return p


def _load(path: str, cap: int | None):
    conf = load(path, cap)
    count = conf.node_count()
    if count > conf["cap"]:
        raise NodeCapExceeded(count, conf["cap"])
    return conf


def _families(as_json: bool) -> int:
    if as_json:
        doc = [{"kind": f.kind, "name": f.name, "summary": f.summary,
                "params": {k: {"default": v.default, "doc": v.doc, "required": v.required}
                           for k, v in sorted(f.params.items())}}
               for f in families.list_families()]
        sys.stdout.write(json.dumps(doc, indent=1) + "\n")
    else:
        sys.stdout.write(families.describe_families())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "families":
        return _families(args.json)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("config error at --threads: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        conf = _load(args.config, args.cap)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error at $: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NodeCapExceeded as exc:
        print(f"resource error: node count {exc.count} exceeds the cap {exc.cap}",
              file=sys.stderr)
        return EXIT_CAP
    if args.command == "validate":
        print(f"ok: {conf['study']} on {conf.node_count()} nodes")
        return EXIT_OK

    name = conf.data.get("name") or Path(args.config).stem
    out = Path(args.out) if args.out else Path("results") / name
    try:
        result, timings = run_config(conf, args.threads)
    except ValueError as exc:
        # semantic problems only detectable once objects are built, e.g. an
        # unspanned-factor claim on a loaded factor
        print(f"config error at $: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    written = write_bundle(conf, result, timings, out)
    for path in written:
        print(path)
    failure = result.first_failure()
    if failure is not None:
        print(f"invariant failed: {failure.name} (value {failure.value:.6g}, "
              f"tolerance {failure.tolerance:.3g})", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"all {len(result.checks)} checks passed")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
