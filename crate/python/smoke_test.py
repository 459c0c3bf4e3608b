"""Smoke test for the shadocnet extension module.

Build first with `cargo build --release -p shadocnet`. The compiled library
is located under target/ (or via SHADOCNET_LIB) and imported from a
temporary directory.
"""

import importlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    if "SHADOCNET_LIB" in os.environ:
        return Path(os.environ["SHADOCNET_LIB"])
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    for profile in ("release", "debug"):
        for name in ("libshadocnet.so", "libshadocnet.dylib", "shadocnet.dll"):
            path = target / profile / name
            if path.exists():
                return path
    sys.exit("shadocnet library not found; run `cargo build --release -p shadocnet`")


def load(workdir):
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    shutil.copy(find_library(), workdir / f"shadocnet{suffix}")
    sys.path.insert(0, str(workdir))
    return importlib.import_module("shadocnet")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sn = load(tmp)

        assert sn.levenshtein("kitten", "sitting") == 3
        h, w = 16, 16
        grey = [0.5] * (h * w * 3)
        brighter = [0.5 + 10 / 255] * (h * w * 3)
        assert abs(sn.rmse(grey, brighter, h, w) - 10.0) < 1e-9
        assert abs(sn.psnr(grey, brighter, h, w) - 20 * math.log10(25.5)) < 1e-9
        assert abs(sn.ssim(grey, grey, h, w) - 1.0) < 1e-12

        data = tmp / "data"
        attenuation = sn.synthesize(str(data), count=4, size=16, seed=3)
        assert len(attenuation) == 4 and all(0.3 <= a <= 0.7 for a in attenuation)

        cfg = json.loads(sn.default_config())
        cfg.update(
            data_root=str(data),
            steps=3,
            batch_size=2,
            output_dir=str(tmp / "run"),
        )
        cfg["model"]["remapper"].update(
            patch_size=4, dim=8, layers=1, heads=2, ffn_mult=2, pos_grid=4, mlp_hidden=[8]
        )
        cfg["model"]["refiner"].update(width=4, stages=1, se_reduction=2, spp_scales=[1, 2])
        cfg["model"]["backbone"]["channels"] = [4, 8]
        cfg["loss"]["lambda_levels"] = [1.0, 1.0, 1.0]
        ckpt = sn.train(json.dumps(cfg))
        assert Path(ckpt).exists()

        model = sn.Model.load(ckpt)
        assert json.loads(model.config)["remapper"]["dim"] == 8
        zeros = [0.0] * (h * w)
        coarse, final, used = model.remove(grey, h, w, zeros)
        assert coarse == grey and used == zeros and len(final) == len(grey)
        coarse, final, used = model.remove(grey, h, w)
        assert len(final) == h * w * 3 and set(used) <= {0.0, 1.0}

        out = tmp / "out"
        out.mkdir()
        for k in range(4):
            stem = f"{k:05}.png"
            model.remove_file(str(data / "input" / stem), str(out / stem), str(data / "mask" / stem))
        report = json.loads(sn.evaluate(str(out), str(data / "target")))
        assert report["means"]["count"] == 4

        try:
            model.remove(grey, h, w + 1)
        except ValueError:
            pass
        else:
            raise AssertionError("size mismatch accepted")

    print("shadocnet smoke test passed")


if __name__ == "__main__":
    main()
