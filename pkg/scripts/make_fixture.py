"""Build the frozen 8-sample evaluation fixture under tests/data/fixture.

    python scripts/make_fixture.py tests/data

Writes 16x16 IDX samples, one classification and one QPI checkpoint trained
briefly on other samples, and the golden ``eval`` CSVs for both. Re-running
overwrites the fixture; the tests pin the checked-in copies.
"""
import struct
import sys
from pathlib import Path

import numpy as np

from diffract_qat import cli
from diffract_qat import data as ds
from diffract_qat import training as tr
from diffract_qat.network import save_checkpoint

SIZE = 16


def main(data_dir: str) -> None:
    root = Path(data_dir)
    out = root / "fixture"
    out.mkdir(parents=True, exist_ok=True)
    raw = ds.load_idx(root / "mnist5k-images-idx3-ubyte.gz", root / "mnist5k-labels-idx1-ubyte.gz")
    order = np.random.default_rng(123).permutation(len(raw))
    picked, seen = [], set()
    for i in order:
        if raw[i].label not in seen and len(picked) < 8:
            picked.append(int(i))
            seen.add(raw[i].label)
    pixels = np.stack([ds.resize_nearest(raw[i].image, (SIZE, SIZE)) for i in picked])
    pixels = np.rint(pixels * 255).astype(np.uint8)
    labels = np.array([raw[i].label for i in picked], dtype=np.uint8)
    (out / "images.idx").write_bytes(struct.pack(">iiii", 2051, 8, SIZE, SIZE) + pixels.tobytes())
    (out / "labels.idx").write_bytes(struct.pack(">ii", 2049, 8) + labels.tobytes())

    rest = [ds.PhaseSample(ds.resize_nearest(raw[i].image, (SIZE, SIZE)), raw[i].label, raw[i].id)
            for i in order[100:400] if int(i) not in picked]
    train, val = rest[:240], rest[240:]
    for task in ("classification", "qpi"):
        cfg = tr.TrainConfig(task=task, quantizer="psq-lt", levels=4, epochs_fp=3, epochs_qat=2,
                             num_layers=2, layer_size=SIZE, fov_size=SIZE, detector_size=SIZE,
                             batch_size=16, lr=0.05, seed=5)
        fp, _ = tr.train_full_precision(cfg, train, val)
        model, _ = tr.train_qat(cfg, fp, train, val)
        ckpt = out / f"{task}.d2nn"
        save_checkpoint(model, ckpt, {"note": "frozen evaluation fixture"})
        code = cli.main(["eval", str(ckpt), "--task", task, "--out", str(out / f"golden_{task}"),
                         "--images", str(out / "images.idx"), "--labels", str(out / "labels.idx")])
        if code:
            raise SystemExit(code)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
