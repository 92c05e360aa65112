"""Write a demo directory with synthetic inputs and one TOML config per CLI command.

    python3 scripts/make_demo.py demo
    cd demo && morphassim pbdw --config pbdw.toml
"""

import argparse

from morphassim.fixtures import write_demo


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", help="output directory (created if missing)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = write_demo(args.root, args.seed)
    print(f"demo written to {root}")
    for cfg in sorted(root.glob("*.toml")):
        print(f"  morphassim {cfg.stem.split('_')[0]} --config {cfg}")


if __name__ == "__main__":
    main()
