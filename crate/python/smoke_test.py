"""Smoke test for the asrlens Python extension.

Build first with `cargo build --release -p asrlens-py`, then run this script
from the repository root.
"""

import json
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libasrlens_py.so"
        if lib.exists():
            break
    else:
        sys.exit("build the extension first: cargo build --release -p asrlens-py")
    tmp = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "asrlens_py.so")
    sys.path.insert(0, str(tmp))
    import asrlens_py

    return asrlens_py


def main():
    al = load_extension()

    model = al.train_toy("copy", seed=7, epochs=150)
    cfg = json.loads(model.config)
    print("copy model:", cfg["d_model"], "wide,", model.num_parameters, "parameters")

    frames, truth = al.copy_examples(7, 1, 123)[0]
    out = model.transcribe(frames)
    print("truth", truth, "greedy", out, "wer", al.wer(truth, out))

    report = json.loads(model.lens(frames, k=3))
    assert report["selected"] == out[1:len(report["selected"]) + 1]
    print("saturation per step:", report["saturation"])

    enc = json.loads(model.encoder_lens(frames))
    assert enc["layers"][-1]["tokens"] == enc["baseline"]
    print("encoder lens depths:", [row["layer"] for row in enc["layers"]])

    assert model.patch(frames, frames, ["dec.L1.cross_attn"], alpha=0.0) == out
    print("ablate dec.L1.cross_attn:", model.ablate(frames, ["dec.L1.cross_attn"]))

    spec = {
        "components": ["dec.*.cross_attn"],
        "mode": {"kind": "ablate"},
        "predicate": "output_changed",
        "exact_match": False,
        "max_len": cfg["max_tokens"],
        "seed": 0,
    }
    sweep = json.loads(model.sweep(json.dumps(spec), [frames]))
    print("sweep ranking:", sweep["ranking"])

    assert al.per([0, 1], [0, 1], [0, 0, 1]) == 0.0
    assert al.detect_repetition([0, 5, 6, 5, 6, 5, 6, 5, 6])
    assert al.saturation_layer([4, 5, 5], 5) == 2

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "copy.bin"
        model.save(str(path))
        assert al.Model.load(str(path)).transcribe(frames) == out
    print("ok")


if __name__ == "__main__":
    main()
