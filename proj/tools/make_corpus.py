"""Builds data/corpus.txt from the reStructuredText help shipped with CMake.

Documents are sorted by path and joined with the 0x1E separator byte until
the size limit is reached.
"""

import argparse
import pathlib

SEPARATOR = b"\x1e"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--source", default="/usr/share/cmake-3.22/Help")
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "corpus.txt"))
    parser.add_argument("--max-bytes", type=int, default=1_500_000)
    args = parser.parse_args()

    docs = sorted(pathlib.Path(args.source).rglob("*.rst"))
    out = bytearray()
    for path in docs:
        text = path.read_bytes().replace(SEPARATOR, b"")
        if out and len(out) + len(text) + 1 > args.max_bytes:
            break
        if out:
            out += SEPARATOR
        out += text
    pathlib.Path(args.out).write_bytes(bytes(out))
    print(f"{len(out)} bytes from {len(docs)} candidate documents -> {args.out}")


if __name__ == "__main__":
    main()
