"""Command-line entry point: zuco-ingest --in DIR --out DIR --policy P."""

from __future__ import annotations

import argparse
import sys

from zuco_ingest.convert import (
    POLICIES,
    IngestError,
    convert_task_files,
    validate_output,
)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="zuco-ingest",
        description="Convert mat/HDF5 word-aligned recording files into "
                    "the retrieval-engine corpus formats.",
    )
    parser.add_argument("--in", dest="input_dir", required=True,
                        help="directory of per-subject .mat/.h5 files")
    parser.add_argument("--out", dest="output_dir", required=True,
                        help="output directory")
    parser.add_argument("--policy", choices=POLICIES, default="zero-fill",
                        help="handling of never-fixated words")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0

    try:
        report = convert_task_files(args.input_dir, args.output_dir,
                                    args.policy)
    except IngestError as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return 1

    errors = validate_output(args.output_dir)
    if errors:
        for err in errors:
            print(f"FAIL: {err}", file=sys.stderr)
        return 1

    n_kept = sum(len(v) for v in report.kept.values())
    n_dropped = sum(len(v) for v in report.dropped.values())
    print(f"OK: {n_kept} recordings written, {n_dropped} dropped "
          f"(policy {report.policy})")
    for subject in sorted(report.dropped):
        for sentence in report.dropped[subject]:
            print(f"dropped: ({sentence}, {subject})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
