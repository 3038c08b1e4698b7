"""Smoke test for the licprune Python extension.

Build the extension first:

    cargo build -p licprune-py

then run `python python/smoke_test.py`. Set LICPRUNE_PY_LIB to point at a
different build of liblicprune_py.so.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension():
    lib = Path(os.environ.get("LICPRUNE_PY_LIB", ROOT / "target" / "debug" / "liblicprune_py.so"))
    if not lib.exists():
        sys.exit(f"{lib} not found; run `cargo build -p licprune-py` first")
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "licprune_py.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("licprune_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    lp = load_extension()

    curve = [(0.2, 28.0), (0.35, 30.1), (0.6, 32.0), (0.95, 34.2), (1.4, 36.1)]
    assert abs(lp.bd_rate(curve, curve)) < 1e-9
    doubled = [(2 * b, d) for b, d in curve]
    assert abs(lp.bd_rate(curve, doubled) - 100.0) < 1e-4

    assert lp.clip_bounds(8) == (0.0, 255.0)
    assert lp.clip_bounds(8, signed=True) == (-128.0, 127.0)
    q = lp.quantize_weights([0.0, 0.013, -0.2, 5.0], 1, [0.01], [20.0], 8)
    assert q[0] == 0.0 and abs(q[1] - 0.01) < 1e-12 and abs(q[2] + 0.2) < 1e-12
    assert abs(q[3] - 0.01 * (255 - 20)) < 1e-12

    assert lp.candidate_counts(32, 8) == [8, 16, 24, 30]
    assert lp.select_count([(8, 0.01), (16, 0.06), (24, 0.03)], 0.05) == 24
    s = lp.sparsity([("a", 32, 32, 9)], {"a": (24, 24)})
    assert s == 0.4375

    codec = lp.Codec("desk", seed=0)
    layers = codec.prunable_layers()
    assert layers and all(len(l) == 4 for l in layers)
    assert codec.param_count() > 0

    try:
        lp.Codec("nonexistent")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    img_dir = Path(tempfile.mkdtemp())
    try:
        from PIL import Image
        import random

        rng = random.Random(0)
        pixels = bytes(rng.randrange(256) for _ in range(64 * 64 * 3))
        Image.frombytes("RGB", (64, 64), pixels).save(img_dir / "noise.png")
        bpp, psnr = codec.evaluate(img_dir / "noise.png")
        assert math.isfinite(bpp) and bpp > 0 and math.isfinite(psnr)
    except ImportError:
        print("Pillow missing; skipped codec evaluation")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
