"""Command line entry point: render figures from a run directory."""

import argparse
import json
import sys

from neurocam_figures import figures


def build_parser():
    p = argparse.ArgumentParser(
        prog="make_figures",
        description="Render publication-style figures from a pipeline "
                    "run directory's CSV/JSON outputs")
    p.add_argument("--run-dir", required=True,
                   help="directory written by the pipeline run command")
    p.add_argument("--out", required=True,
                   help="directory for the rendered images")
    p.add_argument("--only", choices=figures.FIGURE_IDS,
                   help="render just this figure")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    specs = figures.default_specs(args.run_dir, args.out)
    ids = [args.only] if args.only else list(figures.FIGURE_IDS)
    try:
        for fid in ids:
            path = figures.render(specs[fid])
            print("%s -> %s" % (fid, path))
    except Exception as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
