"""Command-line entry point.

Subcommands: export (manifest -> feature files), verify (validate files).
Exit codes: 0 success, 2 config error, 3 data or I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, DataError, ExportError


def _cmd_export(args) -> int:
    from .exporter import export
    from .manifest import read_manifest

    man = read_manifest(args.manifest)
    for result in export(man, allow_any_rate=args.allow_any_rate):
        print(f"wrote {result.path}: n_utts={result.n_utts} frames={result.frames} "
              f"dim={result.teacher_dim} layer={result.layer}")
    return 0


def _cmd_verify(args) -> int:
    from .featfile import validate_feature_file

    failures = 0
    for path in args.paths:
        try:
            h = validate_feature_file(path)
        except (ExportError, OSError) as exc:
            print(f"FAIL {path}: {exc}")
            failures += 1
        else:
            print(f"PASS {path}: n_utts={h.n_utts} frames={h.frames} "
                  f"dim={h.teacher_dim} layer={h.layer} teacher={h.teacher_name}")
    return 3 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teacher-export",
                                     description="frozen-teacher feature extraction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run a manifest through its teacher")
    p.add_argument("--manifest", required=True, help="key=value manifest file")
    p.add_argument("--allow-any-rate", action="store_true")
    p.set_defaults(fn=_cmd_export)

    p = sub.add_parser("verify", help="validate feature files")
    p.add_argument("paths", nargs="+", help="feature files to check")
    p.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        import transformers

        transformers.logging.set_verbosity_error()
        transformers.logging.disable_progress_bar()
    except ImportError:
        pass
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
