"""Fetch a ~5 MB public-domain English text (the plays bundled with the
``shakespeare`` sdist on PyPI) and write it as one UTF-8 file.

    python3 scripts/prepare_corpus.py --out data/shakespeare.txt
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "shakespeare==0.6"
TEXT_GLOB = "*/shksprdata/texts/*_gut.txt"


def fetch_sdist(dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:", PACKAGE, "-d", str(dest), "-q"],
        check=True,
    )
    (archive,) = dest.glob("shakespeare-*.tar.gz")
    return archive


def extract_text(archive: Path) -> bytes:
    """Concatenate the modern-spelling plays in sorted file order."""
    parts = []
    with tarfile.open(archive) as tar:
        members = sorted(
            (m for m in tar.getmembers() if Path(m.name).match(TEXT_GLOB)),
            key=lambda m: m.name,
        )
        for m in members:
            parts.append(tar.extractfile(m).read().replace(b"\r\n", b"\n"))
    if not parts:
        raise RuntimeError(f"no texts found in {archive}")
    return b"\n".join(parts)


def prepare(out: Path) -> Path:
    if out.exists():
        return out
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        data = extract_text(fetch_sdist(Path(tmp)))
    tmp_out = out.with_suffix(".partial")
    tmp_out.write_bytes(data)
    tmp_out.rename(out)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt")
    args = ap.parse_args()
    path = prepare(args.out)
    print(f"{path}: {path.stat().st_size} bytes")


if __name__ == "__main__":
    main()
